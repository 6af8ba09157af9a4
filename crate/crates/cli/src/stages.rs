//! One function per subcommand. Each stage writes into its own directory
//! under `out_dir` together with `config.toml` (the effective config) and
//! `manifest.json`.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use canguard::attacks::{
    attack_success_rate, attack_windows, best_row, epsilon_sweep, write_sweep_csv, AttackConfig, AttackKind, SweepRow,
};
use canguard::can_codec::{parse_dbc, SignalCatalog};
use canguard::dataset::{prepare_dataset, read_windows, write_windows, AttackProvenance, PreparedDataset};
use canguard::defense::{adversarial_retrain, evaluate_robustness, plateau_iteration, write_retrain_history_csv};
use canguard::eval::{compute_metrics, emit_curves, optimizer_comparison, write_table_csv, MetricsReport};
use canguard::nnet::{fit, init_model, read_checkpoint, write_checkpoint, DetectorModel};
use canguard::traffic::{
    decode_frames, encode_trace, generate_trace_at, ingest_decoded_csv, read_raw_trace, write_decoded_csv,
    write_raw_trace, Label, SampleWindow,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::Common;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration: exit code 1.
    Config(String),
    /// Anything that fails while running: exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

trait Context<T> {
    fn context(self, what: impl fmt::Display) -> Result<T>;
}

impl<T, E: fmt::Display> Context<T> for std::result::Result<T, E> {
    fn context(self, what: impl fmt::Display) -> Result<T> {
        self.map_err(|e| CliError::Runtime(format!("{what}: {e}")))
    }
}

struct Loaded {
    cfg: RunConfig,
    text: String,
    catalog: SignalCatalog,
}

fn load(common: &Common) -> Result<Loaded> {
    let (mut cfg, base) = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            let cfg = RunConfig::parse(&text)
                .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
            (cfg, path.parent().map(Path::to_path_buf))
        }
        None => (RunConfig::default(), None),
    };
    if let Some(seed) = common.seed {
        cfg.override_seeds(seed);
    }
    // Serialized before rebasing: paths stay as written, relative to the
    // config file, so the recorded config does not depend on the run location.
    let text = toml::to_string(&cfg).context("serializing config")?;
    if let Some(base) = base {
        cfg.rebase(&base);
    }
    let problems = cfg.validate();
    if !problems.is_empty() {
        let list: Vec<String> = problems.iter().map(|p| format!("  - {p}")).collect();
        return Err(CliError::Config(format!("configuration has {} problem(s):\n{}", problems.len(), list.join("\n"))));
    }
    let catalog = load_catalog(cfg.dbc.as_deref())?;
    Ok(Loaded { cfg, text, catalog })
}

fn load_catalog(dbc: Option<&Path>) -> Result<SignalCatalog> {
    let Some(path) = dbc else {
        return Ok(SignalCatalog::bundled());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read DBC {}: {e}", path.display())))?;
    let report = parse_dbc(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if report.skipped_lines > 0 {
        log::info!("{}: skipped {} unsupported lines", path.display(), report.skipped_lines);
    }
    if report.catalog.is_empty() {
        return Err(CliError::Config(format!("{}: no signals defined", path.display())));
    }
    Ok(report.catalog)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).context(format!("cannot create {}", path.display()))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).context(format!("cannot open {}", path.display()))
}

fn stage_dir(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    let dir = cfg.out_dir.join(name);
    fs::create_dir_all(&dir).context(format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_sha256: String,
    seeds: Vec<(&'static str, u64)>,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn write_manifest(dir: &Path, command: &str, loaded: &Loaded, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
    let config_path = dir.join("config.toml");
    fs::write(&config_path, &loaded.text).context(format!("cannot write {}", config_path.display()))?;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_sha256: format!("{:x}", Sha256::digest(loaded.text.as_bytes())),
        seeds: loaded.cfg.seeds(),
        inputs: inputs.iter().map(|p| p.strip_prefix(&loaded.cfg.out_dir).unwrap_or(p).display().to_string()).collect(),
        outputs: outputs.iter().map(|p| file_name(p)).chain(["config.toml".to_string()]).collect(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).context("serializing manifest")?;
    fs::write(&path, text + "\n").context(format!("cannot write {}", path.display()))
}

const SPLITS: [&str; 3] = ["train", "validation", "test"];

fn split_path(cfg: &RunConfig, split: &str) -> PathBuf {
    cfg.out_dir.join("data").join(format!("{split}.bin"))
}

fn read_split(cfg: &RunConfig, catalog: &SignalCatalog, split: &str) -> Result<Vec<SampleWindow>> {
    let path = split_path(cfg, split);
    if !path.is_file() {
        return Err(CliError::Runtime(format!("{} not found; run `canguard gen` first", path.display())));
    }
    let (windows, names) = read_windows(open(&path)?).context(path.display())?;
    if names != catalog.signal_names() {
        return Err(CliError::Runtime(format!("{}: signals do not match the configured catalog", path.display())));
    }
    Ok(windows)
}

fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("train").join("model.ckpt")
}

fn load_model(path: &Path, cfg: &RunConfig, catalog: &SignalCatalog) -> Result<DetectorModel> {
    if !path.is_file() {
        return Err(CliError::Runtime(format!("checkpoint {} not found", path.display())));
    }
    let (model, _) = read_checkpoint(open(path)?).context(path.display())?;
    let (d, t) = (catalog.signal_count(), cfg.data.seq_len());
    if (model.config.input_dim, model.config.seq_len) != (d, t) {
        return Err(CliError::Runtime(format!(
            "checkpoint {} expects ({}, {}) inputs but the data is ({t}, {d})",
            path.display(),
            model.config.seq_len,
            model.config.input_dim
        )));
    }
    Ok(model)
}

fn save_model(path: &Path, model: &DetectorModel, tag: &impl Serialize) -> Result<()> {
    let tag = serde_json::to_string(tag).context("serializing checkpoint tag")?;
    let mut w = create(path)?;
    write_checkpoint(model, &tag, &mut w).context(path.display())?;
    w.flush().context(path.display())
}

pub fn decode(common: &Common, dbc: Option<PathBuf>, trace: &Path, out: &Path) -> Result<()> {
    let catalog = match dbc {
        Some(p) => {
            if !p.is_file() {
                return Err(CliError::Config(format!("DBC file {} does not exist", p.display())));
            }
            load_catalog(Some(&p))?
        }
        None if common.config.is_some() => load(common)?.catalog,
        None => SignalCatalog::bundled(),
    };
    let frames = read_raw_trace(open(trace)?).context(trace.display())?;
    let (series, skipped) = decode_frames(&frames, &catalog);
    if skipped > 0 {
        log::warn!("skipped {skipped} frames with ids not in the catalog");
    }
    if series.total_observations() == 0 {
        log::warn!("{}: no decodable frames; writing header only", trace.display());
    }
    let mut w = create(out)?;
    write_decoded_csv(&series, &mut w).context(out.display())?;
    w.flush().context(out.display())?;
    log::info!("decoded {} frames into {} observations", frames.len() - skipped, series.total_observations());
    Ok(())
}

pub fn gen(common: &Common) -> Result<()> {
    let loaded = load(common)?;
    let (cfg, catalog) = (&loaded.cfg, &loaded.catalog);
    let dir = stage_dir(cfg, "data")?;
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    let series = match &cfg.trace {
        Some(path) => {
            inputs.push(path.clone());
            ingest_decoded_csv(open(path)?, catalog).context(path.display())?
        }
        None => {
            let series = generate_trace_at(catalog, cfg.data.duration_s, cfg.data.rate_hz, cfg.data.trace_seed)
                .context("generating trace")?;
            let raw = dir.join("trace_raw.csv");
            let frames = encode_trace(&series, catalog).context("encoding trace")?;
            let mut w = create(&raw)?;
            write_raw_trace(&frames, &mut w).context(raw.display())?;
            let decoded = dir.join("trace_decoded.csv");
            write_decoded_csv(&series, create(&decoded)?).context(decoded.display())?;
            outputs.extend([raw, decoded]);
            series
        }
    };
    let PreparedDataset { split, total_windows, attacked_windows, .. } =
        prepare_dataset(catalog, &series, &cfg.data).context("building dataset")?;
    let names = catalog.signal_names();
    let summary = dir.join("summary.csv");
    let mut s = csv::Writer::from_writer(create(&summary)?);
    s.write_record(["split", "windows", "attack", "normal"]).context(summary.display())?;
    for (name, windows) in SPLITS.iter().zip([&split.train, &split.validation, &split.test]) {
        let path = split_path(cfg, name);
        let mut w = create(&path)?;
        write_windows(windows, &names, &mut w).context(path.display())?;
        w.flush().context(path.display())?;
        let attack = windows.iter().filter(|x| x.label == Label::Attack).count();
        s.write_record([name.to_string(), windows.len().to_string(), attack.to_string(), (windows.len() - attack).to_string()])
            .context(summary.display())?;
        outputs.push(path);
    }
    s.flush().context(summary.display())?;
    outputs.push(summary);
    write_manifest(&dir, "gen", &loaded, &inputs, &outputs)?;
    println!(
        "{total_windows} windows ({attacked_windows} attacked): train {}, validation {}, test {} -> {}",
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        dir.display()
    );
    Ok(())
}

fn write_metrics_csv(path: &Path, rows: &[(&str, &MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut run = || -> std::result::Result<(), csv::Error> {
        w.write_record(["model", "accuracy", "recall", "precision", "f1", "tp", "fp", "tn", "fn"])?;
        for (name, m) in rows {
            w.write_record([
                name.to_string(),
                m.accuracy.to_string(),
                m.recall.to_string(),
                m.precision.to_string(),
                m.f1.to_string(),
                m.tp.to_string(),
                m.fp.to_string(),
                m.tn.to_string(),
                m.fn_.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    };
    run().context(path.display())
}

pub fn train(common: &Common) -> Result<()> {
    let loaded = load(common)?;
    let (cfg, catalog) = (&loaded.cfg, &loaded.catalog);
    let train = read_split(cfg, catalog, "train")?;
    let val = read_split(cfg, catalog, "validation")?;
    let test = read_split(cfg, catalog, "test")?;
    let dir = stage_dir(cfg, "train")?;
    let model_cfg = cfg.model_config(catalog.signal_count());
    let train_cfg = cfg.train.resolve(&cfg.train.optimizer);
    let start = Instant::now();
    let outcome = fit(init_model(&model_cfg), &train, &val, &train_cfg).context("training")?;
    log::info!("training took {:.1} s", start.elapsed().as_secs_f64());

    let ckpt = dir.join("model.ckpt");
    save_model(&ckpt, &outcome.model, &serde_json::json!({ "model": model_cfg, "train": train_cfg }))?;
    let mut outputs = vec![ckpt];
    outputs.extend(emit_curves(&outcome.history, &dir).context("writing curves")?);
    let metrics = compute_metrics(&outcome.model, &test).context("evaluating")?;
    let metrics_path = dir.join("metrics.csv");
    write_metrics_csv(&metrics_path, &[("test", &metrics)])?;
    outputs.push(metrics_path);
    let inputs: Vec<PathBuf> = SPLITS.iter().map(|s| split_path(cfg, s)).collect();
    write_manifest(&dir, "train", &loaded, &inputs, &outputs)?;
    println!("test accuracy {:.4} (f1 {:.4}) -> {}", metrics.accuracy, metrics.f1, dir.display());
    Ok(())
}

fn sweep(model: &DetectorModel, test: &[SampleWindow], cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let a = &cfg.attack;
    let mut rows = epsilon_sweep(model, test, &a.template(AttackKind::Fgsm), &a.fgsm_epsilons, &[]).context("FGSM sweep")?;
    rows.extend(
        epsilon_sweep(model, test, &a.template(AttackKind::Bim), &a.bim_epsilons, &a.bim_alpha_fractions)
            .context("BIM sweep")?,
    );
    Ok(rows)
}

fn best_configs(rows: &[SweepRow], cfg: &RunConfig) -> Vec<AttackConfig> {
    [AttackKind::Fgsm, AttackKind::Bim]
        .into_iter()
        .filter_map(|k| {
            let of_kind: Vec<SweepRow> = rows.iter().filter(|r| r.kind == k).cloned().collect();
            best_row(&of_kind).map(|r| r.config(&cfg.attack.template(k)))
        })
        .collect()
}

pub fn attack(common: &Common, checkpoint: Option<PathBuf>) -> Result<()> {
    let loaded = load(common)?;
    let (cfg, catalog) = (&loaded.cfg, &loaded.catalog);
    let ckpt = checkpoint.unwrap_or_else(|| default_checkpoint(cfg));
    let model = load_model(&ckpt, cfg, catalog)?;
    let test = read_split(cfg, catalog, "test")?;
    let dir = stage_dir(cfg, "attack")?;

    let rows = sweep(&model, &test, cfg)?;
    let sweep_path = dir.join("sweep.csv");
    write_sweep_csv(&rows, create(&sweep_path)?).context(sweep_path.display())?;
    let mut outputs = vec![sweep_path];

    let report_path = dir.join("best.csv");
    let mut w = csv::Writer::from_writer(create(&report_path)?);
    w.write_record([
        "kind",
        "epsilon",
        "alpha",
        "iterations",
        "success_rate",
        "post_attack_accuracy",
        "clean_accuracy",
        "normal_total",
        "normal_correct_after",
        "attack_total",
        "attack_correct_after",
    ])
    .context(report_path.display())?;
    let names = catalog.signal_names();
    for best in best_configs(&rows, cfg) {
        let r = attack_success_rate(&model, &test, &best).context("attack")?;
        w.write_record([
            best.kind.to_string(),
            best.epsilon.to_string(),
            best.alpha.to_string(),
            best.iterations.to_string(),
            r.success_rate.to_string(),
            r.post_attack_accuracy.to_string(),
            r.clean_accuracy.to_string(),
            r.normal.total.to_string(),
            r.normal.correct_after.to_string(),
            r.attack.total.to_string(),
            r.attack.correct_after.to_string(),
        ])
        .context(report_path.display())?;
        println!("{}: success rate {:.4}", best.label(), r.success_rate);

        let stem = format!("adversarial_test_{}", best.kind.to_string().to_lowercase());
        let adv = attack_windows(&model, &test, &best).context("attack")?;
        let bin = dir.join(format!("{stem}.bin"));
        let mut bw = create(&bin)?;
        write_windows(&adv, &names, &mut bw).context(bin.display())?;
        bw.flush().context(bin.display())?;
        let prov = AttackProvenance {
            attack: best.clone(),
            seed: cfg.attack.seed,
            source: split_path(cfg, "test").display().to_string(),
            model: ckpt.display().to_string(),
        };
        let json = dir.join(format!("{stem}.provenance.json"));
        fs::write(&json, prov.to_json().context("provenance")? + "\n").context(json.display())?;
        outputs.extend([bin, json]);
    }
    w.flush().context(report_path.display())?;
    outputs.push(report_path);
    write_manifest(&dir, "attack", &loaded, &[ckpt, split_path(cfg, "test")], &outputs)?;
    Ok(())
}

fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    if !path.is_file() {
        return Err(CliError::Runtime(format!(
            "{} not found; run `canguard attack` first or list [[defense.attacks]] in the config",
            path.display()
        )));
    }
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.context(path.display())?;
        let bad = |what: &str| CliError::Runtime(format!("{}: invalid {what} in {:?}", path.display(), rec));
        let num = |i: usize, what: &str| rec.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| bad(what));
        rows.push(SweepRow {
            kind: rec.get(0).and_then(|k| k.parse().ok()).ok_or_else(|| bad("kind"))?,
            epsilon: num(1, "epsilon")?,
            alpha: num(2, "alpha")?,
            iterations: rec.get(3).and_then(|v| v.parse().ok()).ok_or_else(|| bad("iterations"))?,
            success_rate: num(4, "success_rate")?,
            post_attack_accuracy: num(5, "post_attack_accuracy")?,
        });
    }
    Ok(rows)
}

pub fn defend(common: &Common, checkpoint: Option<PathBuf>) -> Result<()> {
    let loaded = load(common)?;
    let (cfg, catalog) = (&loaded.cfg, &loaded.catalog);
    let ckpt = checkpoint.unwrap_or_else(|| default_checkpoint(cfg));
    let model = load_model(&ckpt, cfg, catalog)?;
    let train = read_split(cfg, catalog, "train")?;
    let val = read_split(cfg, catalog, "validation")?;
    let test = read_split(cfg, catalog, "test")?;
    let mut inputs = vec![ckpt.clone()];
    let attacks = if cfg.defense.attacks.is_empty() {
        let sweep_path = cfg.out_dir.join("attack").join("sweep.csv");
        let attacks = best_configs(&read_sweep(&sweep_path)?, cfg);
        inputs.push(sweep_path);
        attacks
    } else {
        cfg.defense.attacks.clone()
    };
    inputs.extend(SPLITS.iter().map(|s| split_path(cfg, s)));
    let dir = stage_dir(cfg, "defend")?;
    let retrain_cfg = cfg.defense.resolve(attacks.clone(), cfg.train.optimizer.resolve());

    let before = evaluate_robustness(&model, &test, &attacks).context("evaluating the starting model")?;
    let state = adversarial_retrain(model, &train, &val, &retrain_cfg).context("adversarial retraining")?;
    let after = evaluate_robustness(&state.model, &test, &attacks).context("evaluating the retrained model")?;

    let robust = dir.join("robust.ckpt");
    // Relative to out_dir so the checkpoint bytes do not depend on where the run lives.
    let source = ckpt.strip_prefix(&cfg.out_dir).unwrap_or(&ckpt).display().to_string();
    save_model(&robust, &state.model, &serde_json::json!({ "source": source, "defense": retrain_cfg }))?;
    let history = dir.join("retrain_history.csv");
    write_retrain_history_csv(&state.history, create(&history)?).context(history.display())?;

    let table = dir.join("robustness.csv");
    let mut w = csv::Writer::from_writer(create(&table)?);
    let mut write = || -> std::result::Result<(), csv::Error> {
        w.write_record(["model", "attack", "epsilon", "alpha", "iterations", "clean_acc", "adv_acc"])?;
        for (name, report) in [("initial", &before), ("retrained", &after)] {
            for e in &report.attacks {
                w.write_record([
                    name.to_string(),
                    e.attack.kind.to_string(),
                    e.attack.epsilon.to_string(),
                    e.attack.alpha.to_string(),
                    e.attack.iterations.to_string(),
                    e.clean_acc.to_string(),
                    e.adv_acc.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    };
    write().context(table.display())?;
    write_manifest(&dir, "defend", &loaded, &inputs, &[robust, history, table])?;
    println!(
        "{} iterations{}, plateau from iteration {}",
        state.iteration,
        if state.stopped_early { " (stopped early)" } else { "" },
        plateau_iteration(&state.history, 0.02).unwrap_or(0)
    );
    for e in &after.attacks {
        println!("{}: clean {:.4} adversarial {:.4}", e.attack.label(), e.clean_acc, e.adv_acc);
    }
    Ok(())
}

pub fn eval(common: &Common, checkpoint: Option<PathBuf>, compare: bool) -> Result<()> {
    let loaded = load(common)?;
    let (cfg, catalog) = (&loaded.cfg, &loaded.catalog);
    let ckpt = checkpoint.unwrap_or_else(|| default_checkpoint(cfg));
    let model = load_model(&ckpt, cfg, catalog)?;
    let test = read_split(cfg, catalog, "test")?;
    let dir = stage_dir(cfg, "eval")?;
    let metrics = compute_metrics(&model, &test).context("evaluating")?;
    let metrics_path = dir.join("metrics.csv");
    write_metrics_csv(&metrics_path, &[(&file_name(&ckpt), &metrics)])?;
    println!("{}: accuracy {:.4} f1 {:.4}", ckpt.display(), metrics.accuracy, metrics.f1);
    let mut outputs = vec![metrics_path];
    let mut inputs = vec![ckpt, split_path(cfg, "test")];

    if compare {
        let train = read_split(cfg, catalog, "train")?;
        let val = read_split(cfg, catalog, "validation")?;
        inputs.extend([split_path(cfg, "train"), split_path(cfg, "validation")]);
        let optimizers: Vec<_> = cfg.eval.optimizers.iter().map(|o| o.resolve()).collect();
        let rows = optimizer_comparison(
            &train,
            &val,
            &test,
            &optimizers,
            &cfg.model_config(catalog.signal_count()),
            &cfg.train.resolve(&cfg.train.optimizer),
        )
        .context("optimizer comparison")?;
        let table = dir.join("table.csv");
        write_table_csv(&rows, create(&table)?).context(table.display())?;
        outputs.push(table);
        for r in &rows {
            let sub = dir.join("curves").join(r.optimizer.kind.to_string().to_lowercase());
            fs::create_dir_all(&sub).context(sub.display())?;
            emit_curves(&r.history, &sub).context("writing curves")?;
            println!("{}: accuracy {:.4} ({:.1} s)", r.optimizer.kind, r.metrics.accuracy, r.metrics.wall_time_s);
        }
    }
    write_manifest(&dir, "eval", &loaded, &inputs, &outputs)?;
    Ok(())
}
