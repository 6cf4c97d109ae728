use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use star_core::data::{self, generate_synthetic, Dataset, DatasetManifest, SyntheticSpec};
use star_core::encoder::{Checkpoint, EncoderParams};
use star_core::inference::{build_centroids_with, centroid_inference, kmeans_with, CentroidBank};
use star_core::metrics::{silhouette_subsample, EvalReport};
use star_core::seed::stream_seed;
use star_core::training::{self, fit_to_dir, StarConfig};
use star_core::UnitEmbedding;

use crate::args::{CompareArgs, ConfigFlags, EvalArgs, ExportArgs, GenerateArgs, TrainArgs, WhichCheckpoint};
use crate::config::{resolve, Mechanism, RunConfigFile};
use crate::error::{input_error, runtime_error, CliError, CliResult};

pub const RUN_FILE: &str = "run.json";
pub const CENTROIDS_FILE: &str = "centroids.json";

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", path.display())))
}

pub fn generate(args: &GenerateArgs) -> CliResult<DatasetManifest> {
    let mut spec = SyntheticSpec::standard(args.seed);
    spec.n_coarse = args.coarse;
    spec.n_fine = args.fine;
    spec.n_per_fine = args.per_fine;
    spec.d_latent = args.d_latent.unwrap_or(spec.d_latent);
    spec.d_in = args.d_in.unwrap_or(spec.d_in);
    spec.coarse_sep = args.coarse_sep.unwrap_or(spec.coarse_sep);
    spec.fine_sep = args.fine_sep.unwrap_or(spec.fine_sep);
    spec.noise = args.noise.unwrap_or(spec.noise);
    spec.test_fraction = args.test_fraction.unwrap_or(spec.test_fraction);
    let synth = generate_synthetic(&spec).map_err(input_error)?;
    data::save_splits(&args.out, &synth.train, &synth.test, &synth.manifest).map_err(runtime_error)?;
    info!(
        "wrote {} train / {} test samples to {}",
        synth.train.len(),
        synth.test.len(),
        args.out.display()
    );
    Ok(synth.manifest)
}

impl ConfigFlags {
    pub fn to_overrides(&self) -> Map<String, Value> {
        let mut m = Map::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        if let Some(o) = self.objective {
            put("objective", serde_json::to_value(o).expect("objective serializes"));
        }
        if let Some(v) = self.gamma {
            put("gamma", v.into());
        }
        if let Some(v) = self.tau {
            put("tau", v.into());
        }
        if let Some(v) = self.base {
            put("base", v.into());
            put("fix_base", false.into());
        }
        if let Some(v) = self.fix_base {
            put("base", v.into());
            put("fix_base", true.into());
        }
        if self.no_ce {
            put("use_ce", false.into());
        }
        if self.no_kl_loss {
            put("kl_loss", false.into());
        }
        if self.no_kl_weight {
            put("kl_weight", false.into());
        }
        if let Some(v) = self.seed {
            put("seed", v.into());
        }
        if let Some(v) = self.k {
            put("k", v.into());
        }
        if let Some(v) = self.lr {
            put("lr", v.into());
        }
        if let Some(v) = self.momentum {
            put("momentum", v.into());
        }
        if let Some(v) = self.batch_size {
            put("batch_size", v.into());
        }
        if let Some(v) = self.queue_capacity {
            put("queue_capacity", v.into());
        }
        if let Some(v) = self.pretrain_epochs {
            put("pretrain_epochs", v.into());
        }
        if let Some(v) = self.train_epochs {
            put("train_epochs", v.into());
        }
        if let Some(v) = self.patience {
            put("patience", v.into());
        }
        m
    }
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub data: PathBuf,
    pub config_hash: String,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub initial_silhouette: f64,
    pub pretrain_ce: Vec<f64>,
}

pub fn load_data(dir: &Path) -> CliResult<(Dataset, Dataset)> {
    let (train, test, manifest) = data::load_splits(dir).map_err(input_error)?;
    if let Some(m) = manifest {
        m.check_against(&train, &test).map_err(input_error)?;
    }
    Ok((train, test))
}

/// Default config for a dataset: category counts come from the data.
fn base_for(train: &Dataset) -> StarConfig {
    StarConfig {
        n_coarse: train.n_coarse,
        n_fine: train.n_fine,
        ..StarConfig::default()
    }
}

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub config: StarConfig,
    pub info: RunInfo,
}

pub fn train(args: &TrainArgs) -> CliResult<TrainOutcome> {
    let file = match &args.config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    let data_dir = args
        .data
        .clone()
        .or(file.data.clone())
        .ok_or_else(|| CliError::config("no dataset given (--data or `data` in the config file)"))?;
    let out = args
        .out
        .clone()
        .or(file.out.clone())
        .ok_or_else(|| CliError::config("no run directory given (--out or `out` in the config file)"))?;
    let (train, _) = load_data(&data_dir)?;
    let config = resolve(base_for(&train), &file.overrides, &args.flags.to_overrides())?;
    train_into(&train, &data_dir, &config, &out)
}

fn train_into(train: &Dataset, data_dir: &Path, config: &StarConfig, out: &Path) -> CliResult<TrainOutcome> {
    if config.n_coarse != train.n_coarse {
        return Err(CliError::config(format!(
            "n_coarse is {} but the dataset has {} coarse categories",
            config.n_coarse, train.n_coarse
        )));
    }
    info!("training {} (config {}) into {}", config.objective, config.config_hash(), out.display());
    let result = fit_to_dir(train, config, out).map_err(runtime_error)?;
    let info = RunInfo {
        data: data_dir.to_path_buf(),
        config_hash: config.config_hash(),
        best_epoch: result.best_epoch,
        epochs_run: result.history.len(),
        initial_silhouette: result.initial_silhouette,
        pretrain_ce: result.pretrain_losses.clone(),
    };
    let text = serde_json::to_string_pretty(&info).expect("run info serializes") + "\n";
    write_text(&out.join(RUN_FILE), &text)?;
    Ok(TrainOutcome {
        run_dir: out.to_path_buf(),
        config: config.clone(),
        info,
    })
}

/// Config, checkpoint and dataset directory of an existing run.
pub struct LoadedRun {
    pub config: StarConfig,
    pub params: EncoderParams,
    pub data_dir: PathBuf,
    pub hash: String,
}

pub fn load_run(run: &Path, data: Option<&Path>, which: WhichCheckpoint) -> CliResult<LoadedRun> {
    let config = training::load_config(&run.join(training::CONFIG_FILE)).map_err(input_error)?;
    let file = match which {
        WhichCheckpoint::Best => training::BEST_FILE,
        WhichCheckpoint::Final => training::FINAL_FILE,
    };
    let ckpt = Checkpoint::load(&run.join(file)).map_err(input_error)?;
    let hash = config.config_hash();
    if ckpt.config_hash != hash {
        return Err(CliError::data(format!(
            "checkpoint config hash {} does not match config.json ({hash})",
            ckpt.config_hash
        )));
    }
    let data_dir = match data {
        Some(d) => d.to_path_buf(),
        None => {
            let path = run.join(RUN_FILE);
            let text = fs::read_to_string(&path)
                .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
            let info: RunInfo =
                serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            info.data
        }
    };
    Ok(LoadedRun {
        config,
        params: ckpt.params,
        data_dir,
        hash,
    })
}

fn embed(params: &EncoderParams, ds: &Dataset) -> CliResult<Vec<UnitEmbedding>> {
    if ds.dim != params.net.input_dim() {
        return Err(CliError::data(format!(
            "dataset has {} features but the encoder expects {}",
            ds.dim,
            params.net.input_dim()
        )));
    }
    params.encode_batch(&ds.features()).map_err(runtime_error)
}

/// Predicted fine labels for `test` under `mechanism`. Centroid inference
/// also returns the bank built from `train`.
pub fn predict(
    run: &LoadedRun,
    train: &Dataset,
    test_embeddings: &[UnitEmbedding],
    mechanism: Mechanism,
) -> CliResult<(Vec<usize>, Option<CentroidBank>)> {
    match mechanism {
        Mechanism::Clustering => {
            let seed = stream_seed(run.config.seed, "eval-clustering");
            let model = kmeans_with(test_embeddings, &run.config.inference_kmeans(seed)).map_err(runtime_error)?;
            Ok((model.assignments, None))
        }
        Mechanism::Centroid => {
            let train_emb = embed(&run.params, train)?;
            let seed = stream_seed(run.config.seed, "eval-centroids");
            let mut bank =
                build_centroids_with(&train_emb, &train.coarse_labels(), &run.config.inference_kmeans(seed), true)
                    .map_err(runtime_error)?;
            bank.config_hash = Some(run.hash.clone());
            let pred = test_embeddings.iter().map(|q| centroid_inference(q, &bank)).collect();
            Ok((pred, Some(bank)))
        }
    }
}

pub fn eval(args: &EvalArgs) -> CliResult<EvalReport> {
    let run = load_run(&args.run, args.data.as_deref(), args.checkpoint)?;
    let (train, test) = load_data(&run.data_dir)?;
    let report = evaluate(&run, &train, &test, args.mechanism, Some(&args.run))?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.run.join(format!("eval-{}.json", args.mechanism)));
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    write_text(&out, &text)?;
    Ok(report)
}

fn evaluate(
    run: &LoadedRun,
    train: &Dataset,
    test: &Dataset,
    mechanism: Mechanism,
    run_dir: Option<&Path>,
) -> CliResult<EvalReport> {
    let truth = test
        .fine_labels()
        .ok_or_else(|| CliError::data("test split has no fine labels to evaluate against"))?;
    let test_emb = embed(&run.params, test)?;
    let (pred, bank) = predict(run, train, &test_emb, mechanism)?;
    if let (Some(bank), Some(dir)) = (bank, run_dir) {
        bank.save(&dir.join(CENTROIDS_FILE)).map_err(runtime_error)?;
    }
    let mut report =
        EvalReport::from_labels(&pred, &truth, run.config.n_fine, mechanism.to_string(), run.hash.clone())
            .map_err(runtime_error)?;
    let max = run.config.silhouette_samples.unwrap_or(usize::MAX);
    let seed = stream_seed(run.config.seed, "eval-silhouette");
    report.silhouette = Some(silhouette_subsample(&test_emb, &pred, max, seed).map_err(runtime_error)?);
    Ok(report)
}

pub fn report_table(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mechanism  {}", report.mechanism);
    let _ = writeln!(s, "samples    {}", report.n);
    let _ = writeln!(s, "ACC        {:.4}", report.acc);
    let _ = writeln!(s, "ARI        {:.4}", report.ari);
    let _ = writeln!(s, "NMI        {:.4}", report.nmi);
    if let Some(sil) = report.silhouette {
        let _ = writeln!(s, "silhouette {sil:.4}");
    }
    let _ = writeln!(s, "config     {}", report.config_hash);
    s
}

pub fn cluster_file_name(cluster: usize, k: usize) -> String {
    let width = k.saturating_sub(1).to_string().len();
    format!("cluster-{cluster:0width$}.txt")
}

/// Writes `cluster-<i>.txt` for each of the K clusters of the training set:
/// one member per line, `id` or `id<TAB>text`.
pub fn export_clusters(args: &ExportArgs) -> CliResult<Vec<PathBuf>> {
    let run = load_run(&args.run, args.data.as_deref(), WhichCheckpoint::Best)?;
    let (train, _) = load_data(&run.data_dir)?;
    let emb = embed(&run.params, &train)?;
    let k = run.config.n_fine;
    let seed = stream_seed(run.config.seed, "export-clusters");
    let model = kmeans_with(&emb, &run.config.inference_kmeans(seed)).map_err(runtime_error)?;
    let mut bodies = vec![String::new(); k];
    for (sample, &c) in train.samples.iter().zip(&model.assignments) {
        let body = &mut bodies[c];
        match &sample.text {
            Some(t) => {
                let flat = t.replace(['\n', '\r', '\t'], " ");
                let _ = writeln!(body, "{}\t{flat}", sample.id);
            }
            None => {
                let _ = writeln!(body, "{}", sample.id);
            }
        }
    }
    create_dir(&args.out)?;
    let mut paths = Vec::with_capacity(k);
    for (c, body) in bodies.iter().enumerate() {
        let path = args.out.join(cluster_file_name(c, k));
        write_text(&path, body)?;
        paths.push(path);
    }
    info!("wrote {k} cluster files to {}", args.out.display());
    Ok(paths)
}

/// One (config, seed) job of `compare`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRun {
    pub config: String,
    pub seed: u64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
    /// Wall time of training plus evaluation.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        if values.is_empty() {
            return Stat { mean: f64::NAN, std: f64::NAN };
        }
        if values.iter().all(|v| *v == values[0]) {
            return Stat { mean: values[0], std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub config: String,
    pub runs: usize,
    pub failed: usize,
    pub acc: Stat,
    pub ari: Stat,
    pub nmi: Stat,
}

pub struct CompareOutcome {
    pub runs: Vec<CompareRun>,
    pub rows: Vec<SummaryRow>,
}

impl CompareOutcome {
    pub fn row(&self, config: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.config == config)
    }
}

/// Unique display names from config file stems.
fn config_names(paths: &[PathBuf]) -> Vec<String> {
    let stems: Vec<String> = paths
        .iter()
        .map(|p| p.file_stem().map_or("config".into(), |s| s.to_string_lossy().into_owned()))
        .collect();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &stems {
        *seen.entry(s).or_default() += 1;
    }
    stems
        .iter()
        .enumerate()
        .map(|(i, s)| if seen[s.as_str()] > 1 { format!("{s}-{i}") } else { s.clone() })
        .collect()
}

/// Trains and evaluates every (config, seed) pair in parallel, then writes
/// `runs.csv`, `summary.csv` and `summary.txt` under `args.out`. Failed
/// jobs are recorded and the others continue; the call errors at the end if
/// any job failed.
pub fn compare(args: &CompareArgs) -> CliResult<CompareOutcome> {
    let (train, test) = load_data(&args.data)?;
    let files: Vec<RunConfigFile> = args
        .configs
        .iter()
        .map(|p| RunConfigFile::load(p))
        .collect::<CliResult<_>>()?;
    let names = config_names(&args.configs);
    if args.seeds.is_empty() {
        return Err(CliError::config("no seeds given"));
    }
    let mut configs = Vec::with_capacity(files.len());
    for file in &files {
        for &seed in &args.seeds {
            let mut flags = Map::new();
            flags.insert("seed".into(), seed.into());
            configs.push(resolve(base_for(&train), &file.overrides, &flags)?);
        }
    }
    create_dir(&args.out)?;

    let jobs: Vec<(usize, u64)> = (0..files.len())
        .flat_map(|c| args.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let runs: Vec<CompareRun> = jobs
        .par_iter()
        .zip(configs.par_iter())
        .map(|(&(c, seed), config)| {
            let dir = args.out.join(&names[c]).join(format!("seed-{seed}"));
            let start = Instant::now();
            let outcome = train_into(&train, &args.data, config, &dir).and_then(|_| {
                let run = load_run(&dir, Some(&args.data), WhichCheckpoint::Best)?;
                evaluate(&run, &train, &test, args.mechanism, Some(&dir))
            });
            match outcome {
                Ok(report) => CompareRun {
                    config: names[c].clone(),
                    seed,
                    report: Some(report),
                    error: None,
                    seconds: start.elapsed().as_secs_f64(),
                },
                Err(e) => {
                    log::error!("{} seed {seed}: {e}", names[c]);
                    CompareRun {
                        config: names[c].clone(),
                        seed,
                        report: None,
                        error: Some(e.to_string()),
                        seconds: start.elapsed().as_secs_f64(),
                    }
                }
            }
        })
        .collect();

    let rows: Vec<SummaryRow> = names
        .iter()
        .map(|name| {
            let ok: Vec<&EvalReport> = runs
                .iter()
                .filter(|r| &r.config == name)
                .filter_map(|r| r.report.as_ref())
                .collect();
            let total = runs.iter().filter(|r| &r.config == name).count();
            let pick = |f: fn(&EvalReport) -> f64| Stat::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                config: name.clone(),
                runs: total,
                failed: total - ok.len(),
                acc: pick(|r| r.acc),
                ari: pick(|r| r.ari),
                nmi: pick(|r| r.nmi),
            }
        })
        .collect();

    write_text(&args.out.join("runs.csv"), &runs_csv(&runs))?;
    write_text(&args.out.join("summary.csv"), &summary_csv(&rows))?;
    let table = summary_table(&rows);
    write_text(&args.out.join("summary.txt"), &table)?;

    let failed = runs.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        return Err(CliError::runtime(format!("{failed} of {} runs failed", runs.len())));
    }
    Ok(CompareOutcome { runs, rows })
}

pub fn runs_csv(runs: &[CompareRun]) -> String {
    let mut s = String::from("config,seed,acc,ari,nmi,silhouette,seconds,error\n");
    for r in runs {
        match &r.report {
            Some(rep) => {
                let sil = rep.silhouette.map_or(String::new(), |v| format!("{v:.6}"));
                let _ = writeln!(
                    s,
                    "{},{},{:.6},{:.6},{:.6},{sil},{:.1},",
                    r.config, r.seed, rep.acc, rep.ari, rep.nmi, r.seconds
                );
            }
            None => {
                let msg = r.error.as_deref().unwrap_or("").replace([',', '\n'], " ");
                let _ = writeln!(s, "{},{},,,,,{:.1},{msg}", r.config, r.seed, r.seconds);
            }
        }
    }
    s
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("config,runs,failed,acc_mean,acc_std,ari_mean,ari_std,nmi_mean,nmi_std\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.config, r.runs, r.failed, r.acc.mean, r.acc.std, r.ari.mean, r.ari.std, r.nmi.mean, r.nmi.std
        );
    }
    s
}

pub fn summary_table(rows: &[SummaryRow]) -> String {
    let width = rows.iter().map(|r| r.config.len()).max().unwrap_or(6).max(6);
    let cell = |s: &Stat| format!("{:.4} ± {:.4}", s.mean, s.std);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$}  {:>4}  {:<15}  {:<15}  {:<15}",
        "config", "runs", "ACC", "ARI", "NMI"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>4}  {:<15}  {:<15}  {:<15}",
            r.config,
            r.runs - r.failed,
            cell(&r.acc),
            cell(&r.ari),
            cell(&r.nmi)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_mean_and_std() {
        let s = Stat::of(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(Stat::of(&[0.4, 0.4, 0.4]).std, 0.0);
        assert_eq!(Stat::of(&[5.0]).std, 0.0);
    }

    #[test]
    fn names_are_unique() {
        let names = config_names(&[PathBuf::from("a/star.toml"), PathBuf::from("b/star.toml"), PathBuf::from("down.json")]);
        assert_eq!(names, vec!["star-0", "star-1", "down"]);
    }

    #[test]
    fn cluster_names_sort() {
        assert_eq!(cluster_file_name(3, 9), "cluster-3.txt");
        assert_eq!(cluster_file_name(3, 12), "cluster-03.txt");
    }

    #[test]
    fn flags_map_to_fields() {
        let flags = ConfigFlags {
            fix_base: Some(1.0),
            no_kl_weight: true,
            gamma: Some(0.0),
            ..ConfigFlags::default()
        };
        let m = flags.to_overrides();
        assert_eq!(m["base"], Value::from(1.0));
        assert_eq!(m["fix_base"], Value::from(true));
        assert_eq!(m["kl_weight"], Value::from(false));
        assert_eq!(m["gamma"], Value::from(0.0));
    }
}
