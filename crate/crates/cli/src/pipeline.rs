//! Pipeline stages behind the CLI commands. Each stage reads and writes only
//! its documented artifact files, so `run` is literally the composition of
//! the individual commands.

use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};
use unlearn_core::config::{RunConfig, StrategyKind};
use unlearn_core::data::{
    generate, load_dataset, make_split, save_dataset, DatasetSplit, GeneratedData,
};
use unlearn_core::error::{Error, Result};
use unlearn_core::eval::{
    eval_scaling, lambda_sweep, similarity_matrix, sweep_csv, zero_shot_eval, EvalReport, Evaluator,
};
use unlearn_core::gapratio::{gap_ratio, BenchmarkTable, GapRatioSpec};
use unlearn_core::model::{load_checkpoint, save_checkpoint, DualEncoderModel, LayerId};
use unlearn_core::objectives::{load_snapshot, save_snapshot, snapshot, GradientSnapshot};
use unlearn_core::rng::Rng;
use unlearn_core::selection::{layer_metrics, metrics_csv, pareto_front, MetricsReport};
use unlearn_core::train::{pretrain, PretrainHistory};
use unlearn_core::unlearn::{
    baseline_run, joint_unlearn, load_delta, run_with_strategy, save_delta, separation_direction,
    single_layer_unlearn_from_snapshot, EvalFn, StrategyOutcome, UnlearnDelta,
};

pub struct Paths {
    pub out: PathBuf,
}

impl Paths {
    pub fn new(out: &Path) -> Self {
        Paths {
            out: out.to_path_buf(),
        }
    }

    pub fn dataset(&self) -> PathBuf {
        self.out.join("dataset.dset")
    }

    pub fn model(&self) -> PathBuf {
        self.out.join("model.ckpt")
    }

    pub fn snapshot(&self) -> PathBuf {
        self.out.join("snapshot.gsnap")
    }

    pub fn metrics(&self) -> PathBuf {
        self.out.join("metrics.csv")
    }

    pub fn front(&self) -> PathBuf {
        self.out.join("front.csv")
    }

    pub fn selection(&self) -> PathBuf {
        self.out.join("selection.json")
    }

    pub fn delta(&self) -> PathBuf {
        self.out.join("delta.delta")
    }

    pub fn joint_delta(&self, concept: u32) -> PathBuf {
        self.out.join(format!("delta_c{concept}.delta"))
    }

    pub fn unlearned(&self) -> PathBuf {
        self.out.join("unlearned.ckpt")
    }

    pub fn trace(&self, layer: LayerId) -> PathBuf {
        self.out.join(format!("trace_{}.csv", layer.name()))
    }

    pub fn unlearn_report(&self) -> PathBuf {
        self.out.join("unlearn_report.json")
    }

    pub fn baseline_model(&self) -> PathBuf {
        self.out.join("baseline.ckpt")
    }

    pub fn baseline_report(&self) -> PathBuf {
        self.out.join("baseline_report.json")
    }

    pub fn eval_report(&self) -> PathBuf {
        self.out.join("eval_report.json")
    }

    pub fn similarity(&self, tag: &str) -> PathBuf {
        self.out.join(format!("similarity_{tag}.csv"))
    }

    pub fn sweep(&self) -> PathBuf {
        self.out.join("sweep.csv")
    }

    pub fn scaling(&self) -> PathBuf {
        self.out.join("eval_scaling.csv")
    }

    pub fn gapratio_json(&self) -> PathBuf {
        self.out.join("gapratio_report.json")
    }

    pub fn gapratio_csv(&self) -> PathBuf {
        self.out.join("gapratio_report.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.out.join("summary.json")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serialization failed: {e}")))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn check_config_hash(found: u64, config: &RunConfig) -> Result<()> {
    let current = config.config_hash();
    if found != current {
        return Err(Error::ConfigHashMismatch {
            artifact: found,
            current,
        });
    }
    Ok(())
}

fn load_dataset_checked(paths: &Paths, config: &RunConfig) -> Result<GeneratedData> {
    let (data, hash) = load_dataset(&paths.dataset())?;
    check_config_hash(hash, config)?;
    Ok(data)
}

fn load_model_checked(path: &Path, config: &RunConfig) -> Result<DualEncoderModel> {
    let (model, hash) = load_checkpoint(path)?;
    check_config_hash(hash, config)?;
    Ok(model)
}

fn load_snapshot_checked(paths: &Paths, config: &RunConfig) -> Result<GradientSnapshot> {
    let (snap, hash) = load_snapshot(&paths.snapshot())?;
    check_config_hash(hash, config)?;
    Ok(snap)
}

fn split_for(config: &RunConfig, data: &GeneratedData) -> Result<DatasetSplit> {
    make_split(
        data,
        &config.unlearn.target_concepts,
        config.unlearn.validation_fraction,
    )
}

fn evaluator_for<'a>(
    config: &RunConfig,
    data: &'a GeneratedData,
    split: &'a DatasetSplit,
) -> Result<Evaluator<'a>> {
    Evaluator::new(
        &split.validation,
        &data.prototypes,
        split.targets.clone(),
        config.unlearn.search_top_k,
    )
}

pub fn gen_data(config: &RunConfig, paths: &Paths) -> Result<()> {
    let spec = config.dataset.to_spec(config.seed);
    let data = generate(&spec)?;
    save_dataset(&data, &paths.dataset(), config.config_hash())?;
    println!(
        "wrote {} ({} train, {} test, {} concepts)",
        paths.dataset().display(),
        data.train.len(),
        data.test.len(),
        spec.concepts
    );
    Ok(())
}

pub fn train(config: &RunConfig, paths: &Paths) -> Result<PretrainHistory> {
    let data = load_dataset_checked(paths, config)?;
    let mut rng = Rng::new(config.init_seed());
    let model = DualEncoderModel::init(&config.architecture, &mut rng)?;
    let (trained, history) = pretrain(&model, &data.train, &config.pretrain)?;
    save_checkpoint(&trained, &paths.model(), config.config_hash())?;
    let report = zero_shot_eval(&trained, &data.train, &data.prototypes, &[])?;
    println!(
        "wrote {} (loss {:.4} -> {:.4}, zero-shot train accuracy {:.3})",
        paths.model().display(),
        history.initial_loss,
        history.final_loss,
        report.ta1
    );
    Ok(history)
}

pub fn grad(config: &RunConfig, paths: &Paths) -> Result<()> {
    let data = load_dataset_checked(paths, config)?;
    let model = load_model_checked(&paths.model(), config)?;
    let split = split_for(config, &data)?;
    let snap = snapshot(&model, &split.forget, &split.retain)?;
    save_snapshot(&snap, &model, &paths.snapshot(), config.config_hash())?;
    println!(
        "wrote {} (forget {} samples, retain {} samples)",
        paths.snapshot().display(),
        snap.forget_count,
        snap.retain_count
    );
    Ok(())
}

#[derive(Serialize)]
struct SelectionArtifact {
    strategy: StrategyKind,
    layers: Vec<String>,
    masked_parameters: Option<usize>,
    degenerate: Vec<String>,
}

pub fn select_stage(config: &RunConfig, paths: &Paths) -> Result<()> {
    let data = load_dataset_checked(paths, config)?;
    let model = load_model_checked(&paths.model(), config)?;
    let _ = data;
    let snap = load_snapshot_checked(paths, config)?;
    let metrics = layer_metrics(&snap, &model)?;
    fs::write(paths.metrics(), metrics_csv(&metrics))?;
    let front = pareto_front(&metrics.active);
    let front_report = MetricsReport {
        active: front.entries.clone(),
        degenerate: Vec::new(),
    };
    fs::write(paths.front(), metrics_csv(&front_report))?;

    let strategy = config.unlearn.resolve_strategy(config.seed);
    let selection = unlearn_core::selection::select(&strategy, &metrics.active, &snap)?;
    let artifact = match &selection {
        unlearn_core::selection::Selection::Layers(ids) => SelectionArtifact {
            strategy: config.unlearn.strategy,
            layers: ids.iter().map(|id| id.name()).collect(),
            masked_parameters: None,
            degenerate: metrics.degenerate.iter().map(|id| id.name()).collect(),
        },
        unlearn_core::selection::Selection::WeightMask(mask) => SelectionArtifact {
            strategy: config.unlearn.strategy,
            layers: Vec::new(),
            masked_parameters: Some(mask.selected_count()),
            degenerate: metrics.degenerate.iter().map(|id| id.name()).collect(),
        },
    };
    write_json(&paths.selection(), &artifact)?;
    println!(
        "wrote {}, {}, {} ({} candidate layers, front size {})",
        paths.metrics().display(),
        paths.front().display(),
        paths.selection().display(),
        metrics.active.len(),
        front.entries.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct UnlearnReport {
    strategy: StrategyKind,
    targets: Vec<u32>,
    layers: Vec<String>,
    lambda: f64,
    search_fa: f64,
    search_ta: f64,
    validation: EvalReport,
    test: EvalReport,
    pre_validation: EvalReport,
    pre_test: EvalReport,
}

pub fn unlearn(config: &RunConfig, paths: &Paths) -> Result<()> {
    let data = load_dataset_checked(paths, config)?;
    let model = load_model_checked(&paths.model(), config)?;
    let snap = load_snapshot_checked(paths, config)?;
    let split = split_for(config, &data)?;
    let evaluator = evaluator_for(config, &data, &split)?;
    let steps = config.unlearn.search_steps;

    let pre_validation =
        zero_shot_eval(&model, &split.validation, &data.prototypes, &split.targets)?;
    let pre_test = zero_shot_eval(&model, &data.test, &data.prototypes, &split.targets)?;

    let (unlearned, layers, lambda, fa, ta) = match config.unlearn.strategy {
        StrategyKind::Pareto => {
            let (unlearned, delta, diagnostics) = single_layer_unlearn_from_snapshot(
                &model,
                &snap,
                &split.forget,
                &mut |m| evaluator.evaluate(m),
                steps,
            )?;
            for candidate in &diagnostics.candidates {
                fs::write(paths.trace(candidate.layer), candidate.trace.to_csv())?;
            }
            save_delta(&delta, &paths.delta(), config.config_hash())?;
            let best = &diagnostics.candidates[diagnostics.chosen];
            (unlearned, vec![delta.layer], delta.lambda, best.fa, best.ta)
        }
        _ => {
            let strategy = config.unlearn.resolve_strategy(config.seed);
            let (unlearned, outcome): (DualEncoderModel, StrategyOutcome) = run_with_strategy(
                &model,
                &snap,
                &strategy,
                &mut |m| evaluator.evaluate(m),
                steps,
            )?;
            if let [layer] = outcome.layers[..] {
                let ordinal = model.ordinal(layer)?;
                let delta = UnlearnDelta {
                    layer,
                    lambda: outcome.lambda,
                    direction: separation_direction(&snap.forget.per_layer[ordinal]),
                    concepts: split.targets.clone(),
                    model_fingerprint: snap.model_fingerprint,
                    snapshot_fingerprint: snap.fingerprint(),
                };
                save_delta(&delta, &paths.delta(), config.config_hash())?;
            }
            (
                unlearned,
                outcome.layers.clone(),
                outcome.lambda,
                outcome.fa,
                outcome.ta,
            )
        }
    };

    save_checkpoint(&unlearned, &paths.unlearned(), config.config_hash())?;
    let validation = zero_shot_eval(
        &unlearned,
        &split.validation,
        &data.prototypes,
        &split.targets,
    )?;
    let test = zero_shot_eval(&unlearned, &data.test, &data.prototypes, &split.targets)?;
    let report = UnlearnReport {
        strategy: config.unlearn.strategy,
        targets: split.targets.clone(),
        layers: layers.iter().map(|l| l.name()).collect(),
        lambda,
        search_fa: fa,
        search_ta: ta,
        validation,
        test,
        pre_validation,
        pre_test,
    };
    write_json(&paths.unlearn_report(), &report)?;
    println!(
        "wrote {} and {} (layers {:?}, lambda {:.6}, search FA {:.3}, search TA {:.3})",
        paths.unlearned().display(),
        paths.unlearn_report().display(),
        report.layers,
        lambda,
        fa,
        ta
    );
    Ok(())
}

#[derive(Serialize)]
struct JointReport {
    targets: Vec<u32>,
    per_concept: Vec<JointConcept>,
    changed_layers: Vec<String>,
    test: EvalReport,
    pre_test: EvalReport,
}

#[derive(Serialize)]
struct JointConcept {
    concept: u32,
    layer: String,
    lambda: f64,
    search_fa: f64,
    search_ta: f64,
}

pub fn joint(config: &RunConfig, paths: &Paths) -> Result<()> {
    let data = load_dataset_checked(paths, config)?;
    let model = load_model_checked(&paths.model(), config)?;
    let targets = &config.unlearn.target_concepts;
    let split = split_for(config, &data)?;
    let forget_sets: Vec<_> = targets
        .iter()
        .map(|&t| make_split(&data, &[t], config.unlearn.validation_fraction).map(|s| s.forget))
        .collect::<Result<_>>()?;
    let evaluators: Vec<Evaluator> = targets
        .iter()
        .map(|&t| {
            Evaluator::new(
                &split.validation,
                &data.prototypes,
                vec![t],
                config.unlearn.search_top_k,
            )
        })
        .collect::<Result<_>>()?;
    let mut eval_fns: Vec<Box<EvalFn>> = evaluators
        .iter()
        .map(|e| Box::new(move |m: &DualEncoderModel| e.evaluate(m)) as Box<EvalFn>)
        .collect();

    let pre_test = zero_shot_eval(&model, &data.test, &data.prototypes, targets)?;
    let (joint_model, deltas, diagnostics) = joint_unlearn(
        &model,
        &forget_sets,
        &split.retain,
        &mut eval_fns,
        config.unlearn.search_steps,
    )?;
    let mut per_concept = Vec::new();
    for ((concept, delta), diag) in targets.iter().zip(&deltas).zip(&diagnostics) {
        save_delta(delta, &paths.joint_delta(*concept), config.config_hash())?;
        let best = &diag.candidates[diag.chosen];
        per_concept.push(JointConcept {
            concept: *concept,
            layer: delta.layer.name(),
            lambda: delta.lambda,
            search_fa: best.fa,
            search_ta: best.ta,
        });
    }
    save_checkpoint(&joint_model, &paths.unlearned(), config.config_hash())?;
    let changed_layers: Vec<String> = model
        .layer_ids()
        .into_iter()
        .filter(|&id| joint_model.get_layer(id).unwrap() != model.get_layer(id).unwrap())
        .map(|id| id.name())
        .collect();
    let test = zero_shot_eval(&joint_model, &data.test, &data.prototypes, targets)?;
    let report = JointReport {
        targets: targets.clone(),
        per_concept,
        changed_layers,
        test,
        pre_test,
    };
    write_json(&paths.unlearn_report(), &report)?;
    println!(
        "wrote {} and {} ({} deltas, changed layers {:?})",
        paths.unlearned().display(),
        paths.unlearn_report().display(),
        deltas.len(),
        report.changed_layers
    );
    Ok(())
}

#[derive(Serialize)]
struct BaselineReport {
    method: unlearn_core::unlearn::BaselineMethod,
    learning_rate: f64,
    iterations: usize,
    validation: EvalReport,
    test: EvalReport,
    pre_test: EvalReport,
}

pub fn baseline(config: &RunConfig, paths: &Paths) -> Result<()> {
    let data = load_dataset_checked(paths, config)?;
    let model = load_model_checked(&paths.model(), config)?;
    let split = split_for(config, &data)?;
    let pre_test = zero_shot_eval(&model, &data.test, &data.prototypes, &split.targets)?;
    let out = baseline_run(&model, &config.baseline, &split.forget, &split.retain)?;
    save_checkpoint(&out, &paths.baseline_model(), config.config_hash())?;
    let report = BaselineReport {
        method: config.baseline.method,
        learning_rate: config.baseline.learning_rate,
        iterations: config.baseline.iterations,
        validation: zero_shot_eval(&out, &split.validation, &data.prototypes, &split.targets)?,
        test: zero_shot_eval(&out, &data.test, &data.prototypes, &split.targets)?,
        pre_test,
    };
    write_json(&paths.baseline_report(), &report)?;
    println!(
        "wrote {} and {} (method {:?})",
        paths.baseline_model().display(),
        paths.baseline_report().display(),
        config.baseline.method
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalArtifact {
    pretrained: EvalReport,
    unlearned: Option<EvalReport>,
}

pub fn eval(config: &RunConfig, paths: &Paths) -> Result<EvalArtifactSummary> {
    let data = load_dataset_checked(paths, config)?;
    let model = load_model_checked(&paths.model(), config)?;
    let targets = &config.unlearn.target_concepts;
    let pretrained = zero_shot_eval(&model, &data.test, &data.prototypes, targets)?;
    let sim = similarity_matrix(&model, &data.test, &data.prototypes)?;
    fs::write(paths.similarity("pretrained"), sim.to_csv())?;

    let unlearned = if paths.unlearned().exists() {
        let unlearned_model = load_model_checked(&paths.unlearned(), config)?;
        let report = zero_shot_eval(&unlearned_model, &data.test, &data.prototypes, targets)?;
        let sim = similarity_matrix(&unlearned_model, &data.test, &data.prototypes)?;
        fs::write(paths.similarity("unlearned"), sim.to_csv())?;
        Some(report)
    } else {
        None
    };
    let artifact = EvalArtifact {
        pretrained: pretrained.clone(),
        unlearned: unlearned.clone(),
    };
    write_json(&paths.eval_report(), &artifact)?;
    println!(
        "wrote {} (pretrained FA {:.3} TA {:.3}{})",
        paths.eval_report().display(),
        pretrained.fa1,
        pretrained.ta1,
        match &unlearned {
            Some(u) => format!(", unlearned FA {:.3} TA {:.3}", u.fa1, u.ta1),
            None => String::new(),
        }
    );
    Ok(EvalArtifactSummary {
        pretrained,
        unlearned,
    })
}

pub struct EvalArtifactSummary {
    pub pretrained: EvalReport,
    pub unlearned: Option<EvalReport>,
}

pub fn sweep(
    config: &RunConfig,
    paths: &Paths,
    layer_override: Option<&str>,
    grid_override: Option<Vec<f64>>,
) -> Result<()> {
    let data = load_dataset_checked(paths, config)?;
    let model = load_model_checked(&paths.model(), config)?;
    let snap = load_snapshot_checked(paths, config)?;
    let split = split_for(config, &data)?;
    let evaluator = evaluator_for(config, &data, &split)?;

    // Layer and grid default from the delta artifact when present.
    let delta = if paths.delta().exists() {
        let (delta, hash) = load_delta(&paths.delta())?;
        check_config_hash(hash, config)?;
        Some(delta)
    } else {
        None
    };
    let layer = match layer_override {
        Some(name) => LayerId::parse(name)?,
        None => delta
            .as_ref()
            .map(|d| d.layer)
            .ok_or_else(|| Error::Config("no delta artifact; pass --layer".into()))?,
    };
    let grid = match grid_override {
        Some(g) => g,
        None => {
            let lambda = delta
                .as_ref()
                .filter(|d| d.layer == layer)
                .map(|d| d.lambda)
                .ok_or_else(|| {
                    Error::Config("no delta for this layer; pass --lambda-grid".into())
                })?;
            [
                0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0, 1.25, 1.5, 2.0,
            ]
            .iter()
            .map(|m| m * lambda)
            .collect()
        }
    };
    let ordinal = model.ordinal(layer)?;
    let direction = separation_direction(&snap.forget.per_layer[ordinal]);
    let rows = lambda_sweep(&model, layer, &direction, &grid, &evaluator)?;
    fs::write(paths.sweep(), sweep_csv(&rows))?;
    println!(
        "wrote {} ({} grid points on {})",
        paths.sweep().display(),
        rows.len(),
        layer.name()
    );
    Ok(())
}

pub fn scaling(config: &RunConfig, paths: &Paths, fractions: &[f64]) -> Result<()> {
    let data = load_dataset_checked(paths, config)?;
    let model = load_model_checked(&paths.model(), config)?;
    let report = eval_scaling(
        &model,
        &data.test,
        &data.prototypes,
        &config.unlearn.target_concepts,
        fractions,
    )?;
    fs::write(paths.scaling(), report.to_csv())?;
    println!(
        "wrote {} (slope {:.3e} s/sample, R^2 {:.4})",
        paths.scaling().display(),
        report.slope,
        report.r_squared
    );
    Ok(())
}

pub fn gapratio(paths: &Paths, input: &Path) -> Result<()> {
    let text = fs::read_to_string(input)?;
    let table = BenchmarkTable::from_csv(&text)?;
    let spec = GapRatioSpec::default_for(&table);
    let report = gap_ratio(&table, &spec)?;
    write_json(&paths.gapratio_json(), &report)?;
    fs::write(paths.gapratio_csv(), report.to_csv())?;
    for m in &report.methods {
        println!("{:>8}: mean GR {:.2}", m.method, m.mean);
    }
    println!(
        "wrote {} and {}",
        paths.gapratio_json().display(),
        paths.gapratio_csv().display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RunSummary {
    config_hash: String,
    pretrain: PretrainHistory,
    pre_unlearn: EvalReport,
    post_unlearn: Option<EvalReport>,
    artifacts: Vec<String>,
}

/// The whole pipeline: gen-data, train, grad, select, unlearn, eval, plus a
/// summary report. Each stage round-trips through its artifact files, so the
/// results are bit-identical to running the commands one at a time.
pub fn run(config: &RunConfig, paths: &Paths) -> Result<()> {
    gen_data(config, paths)?;
    let history = train(config, paths)?;
    grad(config, paths)?;
    select_stage(config, paths)?;
    unlearn(config, paths)?;
    let eval_summary = eval(config, paths)?;
    let artifacts = [
        paths.dataset(),
        paths.model(),
        paths.snapshot(),
        paths.metrics(),
        paths.front(),
        paths.selection(),
        paths.delta(),
        paths.unlearned(),
        paths.unlearn_report(),
        paths.eval_report(),
    ]
    .iter()
    .filter(|p| p.exists())
    .map(|p| {
        p.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    })
    .collect();
    let summary = RunSummary {
        config_hash: format!("{:016x}", config.config_hash()),
        pretrain: history,
        pre_unlearn: eval_summary.pretrained,
        post_unlearn: eval_summary.unlearned,
        artifacts,
    };
    write_json(&paths.summary(), &summary)?;
    println!("wrote {}", paths.summary().display());
    Ok(())
}
