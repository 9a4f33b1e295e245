use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use spnet::data::{cache_read, cache_write, load_modelnet, synth_shapes, Dataset, ShapeClass, Split};
use spnet::energy::{
    count_ann_ops, count_snn_ops, energy_ratio, estimate_energy, gradient_histogram, CountOptions, EnergyConstants,
    EnergyReport, HistogramRequest, OpCounts,
};
use spnet::model::{build_model, read_checkpoint, run_snn, write_checkpoint, Checkpoint, MembraneInit, Mode};
use spnet::train::{compare_paradigms, evaluate, Comparison, EpochRecord, EvalReport, Paradigm};

use crate::config::{self, Loaded, RunConfig};
use crate::{CliError, CompareArgs, EvalArgs, ExperimentArgs, GradhistArgs, ModeArg, PrepareArgs, ProfileArgs, Switch, SynthArgs, TrainArgs};

fn emit(kind: &str, data: &impl Serialize) {
    println!("{}", json!({ "kind": kind, "data": data }));
}

/// Creates `dir`, refusing to reuse a nonempty one without `force`.
fn claim_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.is_file() {
        return Err(CliError::Usage(format!("{} is a file, expected a directory", dir.display())));
    }
    let occupied = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !force {
        return Err(CliError::Usage(format!(
            "output directory {} is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}", dir.display()), e))
}

fn claim_file(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Usage(format!("{} exists; pass --force to overwrite", path.display())));
    }
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            fs::create_dir_all(p).map_err(|e| CliError::io(format!("cannot create {}", p.display()), e))
        }
        _ => Ok(()),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(format!("cannot create {}", path.display()), e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| CliError::io(path.display().to_string(), e.into()))?;
    writeln!(out).and_then(|_| out.flush()).map_err(|e| CliError::io(path.display().to_string(), e))
}

fn echo_config(config: &RunConfig) -> Result<(), CliError> {
    emit("config", config);
    write_json(&config.output_dir.join("config.json"), config)
}

fn apply_overrides(c: &mut RunConfig, a: &ExperimentArgs) {
    if let Some(p) = &a.out {
        c.output_dir = p.clone();
    }
    if let Some(p) = &a.train_cache {
        c.data.train_cache = p.clone();
    }
    if let Some(p) = &a.test_cache {
        c.data.test_cache = Some(p.clone());
    }
    if let Some(m) = a.mode {
        c.model.mode = match m {
            ModeArg::Ann => Mode::Ann,
            ModeArg::Snn => Mode::Snn,
        };
    }
    if let Some(s) = a.seed {
        c.train.seed = s;
        c.train.perturbation.seed = s;
    }
    if let Some(e) = a.epochs {
        c.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        c.train.batch_size = b;
    }
    if let Some(lr) = a.lr {
        c.train.learning_rate = lr;
    }
    if let Some(k) = a.slope {
        c.model.neuron.k = k;
    }
    if let Some(w) = &a.point_widths {
        c.model.point_mlp_widths = w.clone();
    }
    if let Some(w) = &a.head_widths {
        c.model.head_widths = w.clone();
    }
}

fn load_experiment(a: &ExperimentArgs) -> Result<Loaded, CliError> {
    let mut loaded = config::load(a.config.as_deref())?;
    apply_overrides(&mut loaded.config, a);
    Ok(loaded)
}

/// Reads the caches and fills in the class count when the config left it out.
fn load_sets(loaded: &mut Loaded, need_test: bool) -> Result<(Dataset, Option<Dataset>), CliError> {
    let c = &mut loaded.config;
    let train = cache_read(&c.data.train_cache)?;
    let test = match &c.data.test_cache {
        Some(p) => Some(cache_read(p)?),
        None if need_test => return Err(CliError::Usage("this command needs data.test_cache".into())),
        None => None,
    };
    if !loaded.classes_given {
        c.model.num_classes = train.num_classes();
    }
    Ok((train, test))
}

pub fn prepare(a: &PrepareArgs) -> Result<(), CliError> {
    if a.points == 0 {
        return Err(CliError::Usage("--points must be positive".into()));
    }
    emit("config", a);
    let mut manifests = BTreeMap::new();
    let mut failures = Vec::new();
    let mut sets = Vec::new();
    for split in [Split::Train, Split::Test] {
        let (set, report) = load_modelnet(&a.data_root, split, a.points, a.seed, a.strict)?;
        for (path, e) in &report.failures {
            eprintln!("skipped {}: {e}", path.display());
            failures.push(json!({ "path": path, "error": e.to_string() }));
        }
        if set.is_empty() {
            return Err(spnet::data::DataError::Dataset(format!(
                "no usable {} meshes under {}",
                split.dir_name(),
                a.data_root.display()
            ))
            .into());
        }
        sets.push((split, set));
    }
    claim_dir(&a.out, a.force)?;
    for (split, set) in &sets {
        cache_write(set, &a.out.join(format!("{}.cache", split.dir_name())))?;
        let counts: BTreeMap<_, _> = set.manifest.class_names.iter().zip(set.class_counts()).collect();
        emit("class_counts", &json!({ "split": split.dir_name(), "counts": counts }));
        manifests.insert(split.dir_name(), set.manifest.clone());
    }
    write_json(&a.out.join("manifest.json"), &json!({ "config": a, "splits": manifests, "failures": failures }))
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    if a.per_class == 0 || a.test_per_class == 0 || a.points == 0 {
        return Err(CliError::Usage("--per-class, --test-per-class and --points must be positive".into()));
    }
    let classes = a
        .classes
        .iter()
        .map(|c| c.parse::<ShapeClass>().map_err(|e| CliError::Usage(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    emit("config", a);
    let train = synth_shapes(&classes, a.per_class, a.points, Split::Train, a.seed)?;
    let test = synth_shapes(&classes, a.test_per_class, a.points, Split::Test, a.seed)?;
    claim_dir(&a.out, a.force)?;
    let mut manifests = BTreeMap::new();
    for set in [&train, &test] {
        let split = set.manifest.split.dir_name();
        cache_write(set, &a.out.join(format!("{split}.cache")))?;
        let counts: BTreeMap<_, _> = set.manifest.class_names.iter().zip(set.class_counts()).collect();
        emit("class_counts", &json!({ "split": split, "counts": counts }));
        manifests.insert(split, set.manifest.clone());
    }
    write_json(&a.out.join("manifest.json"), &json!({ "config": a, "splits": manifests }))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    final_epoch: Option<&'a EpochRecord>,
    eval_set: &'static str,
    eval: EvalReport,
    parameter_count: usize,
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut loaded = load_experiment(&a.common)?;
    let c = &mut loaded.config;
    if let Some(t) = a.t_train {
        c.train.train_time_steps = t;
    }
    if let Some(t) = a.t_eval {
        c.eval.time_steps = t;
    }
    if let Some(m) = a.mpp {
        c.train.perturbation.enabled = m == Switch::On;
    }
    let (train_set, test_set) = load_sets(&mut loaded, false)?;
    let c = &loaded.config;
    c.train.validate(&c.model)?;
    claim_dir(&c.output_dir, a.common.force)?;
    echo_config(c)?;

    let log_path = c.output_dir.join("log.jsonl");
    let mut log = create(&log_path)?;
    let mut log_error = None;
    let initial = build_model::<f32>(&c.model, c.train.seed)?;
    let outcome = spnet::train::train(&c.model, initial, &train_set, test_set.as_ref(), &c.train, |r| {
        emit("epoch", r);
        if log_error.is_none() {
            log_error = serde_json::to_writer(&mut log, r)
                .map_err(std::io::Error::from)
                .and_then(|_| writeln!(log))
                .err();
        }
    })?;
    if let Some(e) = log_error.or_else(|| log.flush().err()) {
        return Err(CliError::io(log_path.display().to_string(), e));
    }

    let ckpt_path = c.output_dir.join("checkpoint.spn");
    let mut out = create(&ckpt_path)?;
    write_checkpoint(&mut out, &c.model, &outcome.params)?;
    out.flush().map_err(|e| CliError::io(ckpt_path.display().to_string(), e))?;

    let (eval_set, name) = match &test_set {
        Some(t) => (t, "test"),
        None => (&train_set, "train"),
    };
    let summary = TrainSummary {
        final_epoch: outcome.log.last(),
        eval_set: name,
        eval: evaluate(&outcome.params, &c.model, eval_set, c.eval.time_steps, c.eval.batch_size)?,
        parameter_count: outcome.params.parameter_count(),
    };
    emit("summary", &summary);
    write_json(&c.output_dir.join("summary.json"), &summary)
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    if let Some(out) = &a.out {
        claim_file(out, a.force)?;
    }
    emit("config", a);
    let ckpt = read_checkpoint(File::open(&a.checkpoint).map_err(|e| CliError::io(a.checkpoint.display().to_string(), e))?)?;
    let set = cache_read(&a.cache)?;
    let report = evaluate(&ckpt.params, &ckpt.spec, &set, a.t_eval, a.batch_size)?;
    emit("report", &report);
    match &a.out {
        Some(out) => write_json(out, &report),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct MedianRow {
    paradigm: Paradigm,
    /// Per averaging horizon, median over seeds.
    accuracy: Vec<f64>,
    per_step_accuracy: Vec<f64>,
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        (values[m - 1] + values[m]) / 2.0
    }
}

fn median_rows(runs: &[Comparison]) -> Vec<MedianRow> {
    Paradigm::ALL
        .iter()
        .enumerate()
        .map(|(i, &paradigm)| {
            let column = |pick: fn(&spnet::train::ComparisonRow) -> &Vec<f64>| -> Vec<f64> {
                let width = pick(&runs[0].rows[i]).len();
                (0..width).map(|t| median(runs.iter().map(|r| pick(&r.rows[i])[t]).collect())).collect()
            };
            MedianRow {
                paradigm,
                accuracy: column(|r| &r.accuracy),
                per_step_accuracy: column(|r| &r.per_step_accuracy),
            }
        })
        .collect()
}

pub fn compare(a: &CompareArgs) -> Result<(), CliError> {
    let mut loaded = load_experiment(&a.common)?;
    let c = &mut loaded.config;
    if let Some(s) = a.seeds {
        c.compare.seeds = s;
    }
    if let Some(t) = a.multi_steps {
        c.compare.multi_steps = t;
    }
    if let Some(t) = a.max_eval_steps {
        c.compare.max_eval_steps = t;
    }
    if c.compare.seeds == 0 {
        return Err(CliError::Usage("compare needs at least one seed".into()));
    }
    let (train_set, test_set) = load_sets(&mut loaded, true)?;
    let test_set = test_set.expect("checked by load_sets");
    let c = &loaded.config;
    for p in Paradigm::ALL {
        p.config(&c.train, c.compare.multi_steps).validate(&c.model)?;
    }
    claim_dir(&c.output_dir, a.common.force)?;
    echo_config(c)?;

    let seeds: Vec<u64> = (0..c.compare.seeds as u64).map(|i| c.train.seed + i).collect();
    let log_path = c.output_dir.join("log.jsonl");
    let mut log = create(&log_path)?;
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let mut base = c.train.clone();
        base.seed = seed;
        base.perturbation.seed = seed;
        let mut lines = Vec::new();
        let run = compare_paradigms(
            &c.model,
            &train_set,
            &test_set,
            &base,
            c.compare.multi_steps,
            c.compare.max_eval_steps,
            |p, r| lines.push(json!({ "seed": seed, "paradigm": p, "epoch": r })),
        )?;
        for line in &lines {
            writeln!(log, "{line}").map_err(|e| CliError::io(log_path.display().to_string(), e))?;
        }
        for row in &run.rows {
            emit("row", &json!({ "seed": seed, "row": row }));
        }
        runs.push(run);
    }
    log.flush().map_err(|e| CliError::io(log_path.display().to_string(), e))?;

    let metadata = json!({
        "seeds": seeds,
        "epochs": c.train.epochs,
        "multi_steps": c.compare.multi_steps,
        "eval_time_steps": (1..=c.compare.max_eval_steps).collect::<Vec<_>>(),
        "train": c.train,
        "model": c.model,
    });
    emit("metadata", &metadata);
    let medians = median_rows(&runs);
    for row in &medians {
        emit("median", row);
    }
    write_json(
        &c.output_dir.join("comparison.json"),
        &json!({ "metadata": metadata, "median": medians, "runs": runs }),
    )
}

#[derive(Serialize)]
struct Baseline {
    counts: OpCounts,
    energy: EnergyReport,
}

#[derive(Serialize)]
struct ProfileReport {
    mode: Mode,
    time_steps: usize,
    samples: usize,
    points: usize,
    fold_norm: bool,
    constants: EnergyConstants,
    multiplications: u64,
    additions: u64,
    firing_rate: Option<f64>,
    counts: OpCounts,
    /// Per-sample energy lives in `energy.per_sample_pj`.
    energy: EnergyReport,
    /// The same architecture as a ReLU network, for spiking checkpoints.
    ann_baseline: Option<Baseline>,
    energy_ratio_vs_ann: Option<f64>,
}

fn snn_counts_with(
    ckpt: &Checkpoint,
    set: &Dataset,
    samples: usize,
    steps: usize,
    batch_size: usize,
    options: CountOptions,
) -> Result<OpCounts, CliError> {
    let indices: Vec<usize> = (0..samples).collect();
    let mut total: Option<OpCounts> = None;
    for chunk in indices.chunks(batch_size) {
        let (points, _) = set.batch(chunk);
        let run = run_snn(&points, &ckpt.params, &ckpt.spec, steps, &MembraneInit::Zeros)?;
        let counts = count_snn_ops(&ckpt.spec, &run.trace, options)?;
        match &mut total {
            Some(t) => t.absorb(&counts)?,
            None => total = Some(counts),
        }
    }
    Ok(total.expect("at least one sample"))
}

pub fn profile(a: &ProfileArgs) -> Result<(), CliError> {
    if a.t_eval == 0 || a.batch_size == 0 {
        return Err(CliError::Usage("--t-eval and --batch-size must be positive".into()));
    }
    let constants = EnergyConstants {
        e_mac_pj: a.e_mac_pj,
        e_ac_pj: a.e_ac_pj,
        ..EnergyConstants::default()
    };
    constants.validate()?;
    if let Some(out) = &a.out {
        claim_file(out, a.force)?;
    }
    emit("config", a);
    let ckpt = read_checkpoint(File::open(&a.checkpoint).map_err(|e| CliError::io(a.checkpoint.display().to_string(), e))?)?;
    let set = cache_read(&a.cache)?;
    let samples = a.samples.unwrap_or(set.len()).min(set.len());
    if samples == 0 {
        return Err(CliError::Usage("nothing to profile".into()));
    }
    let options = CountOptions {
        fold_norm: !a.unfolded_norm,
    };
    let n = set.manifest.points_per_cloud;
    let spec = &ckpt.spec;
    let mut ann_spec = spec.clone();
    ann_spec.mode = Mode::Ann;
    let ann = count_ann_ops(&ann_spec, n, options)?;
    let (counts, time_steps) = match spec.mode {
        Mode::Ann => (ann.clone(), 1),
        Mode::Snn => (snn_counts_with(&ckpt, &set, samples, a.t_eval, a.batch_size, options)?, a.t_eval),
    };
    let spiking = spec.mode == Mode::Snn;
    let report = ProfileReport {
        mode: spec.mode,
        time_steps,
        samples: if spiking { samples } else { 1 },
        points: n,
        fold_norm: options.fold_norm,
        multiplications: counts.multiplications(),
        additions: counts.additions(),
        firing_rate: spiking.then_some(counts.firing_rate),
        energy: estimate_energy(&counts, &constants),
        ann_baseline: spiking.then(|| Baseline {
            energy: estimate_energy(&ann, &constants),
            counts: ann.clone(),
        }),
        energy_ratio_vs_ann: spiking.then(|| energy_ratio(&ann, &counts, &constants)),
        counts,
        constants,
    };
    emit("report", &report);
    match &a.out {
        Some(out) => write_json(out, &report),
        None => Ok(()),
    }
}

pub fn gradhist(a: &GradhistArgs) -> Result<(), CliError> {
    let mut loaded = load_experiment(&a.common)?;
    let c = &mut loaded.config;
    if let Some(ks) = &a.ks {
        c.gradhist.ks = ks.clone();
    }
    if let Some(ts) = &a.time_steps {
        c.gradhist.time_steps = ts.clone();
    }
    if let Some(s) = a.samples {
        c.gradhist.samples = s;
    }
    let (train_set, _) = load_sets(&mut loaded, false)?;
    let c = &loaded.config;
    let g = &c.gradhist;
    if g.samples < 2 || g.ks.is_empty() || g.time_steps.is_empty() {
        return Err(CliError::Usage("gradhist needs at least two samples, one k and one time step".into()));
    }
    if train_set.num_classes() != c.model.num_classes {
        return Err(CliError::Usage(format!(
            "cache has {} classes, model has {}",
            train_set.num_classes(),
            c.model.num_classes
        )));
    }
    claim_dir(&c.output_dir, a.common.force)?;
    echo_config(c)?;

    let picks: Vec<usize> = (0..g.samples).map(|i| i * train_set.len() / g.samples).collect();
    let (points, labels) = train_set.batch(&picks);
    let request = HistogramRequest {
        points: &points,
        labels: &labels,
        ks: &g.ks,
        time_steps: &g.time_steps,
        seed: c.train.seed,
        bins: g.bins,
    };
    for h in gradient_histogram(&c.model, &request)? {
        let file: PathBuf = c.output_dir.join(format!("hist_k{}_t{}.json", h.k, h.time_steps));
        write_json(&file, &h)?;
        emit(
            "histogram",
            &json!({
                "file": file,
                "layer": h.layer,
                "k": h.k,
                "time_steps": h.time_steps,
                "total": h.total(),
                "zero_count": h.zero_count,
                "fraction_below_1e_6": h.fraction_below_1e_6,
                "fraction_above_1e1": h.fraction_above_1e1,
                "log10_iqr": h.log10_iqr,
                "peak_fraction": h.peak_fraction,
                "flatness": h.flatness,
            }),
        );
    }
    Ok(())
}
