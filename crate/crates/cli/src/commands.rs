//! Subcommand implementations.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use emem::data::{
    generate_synthetic, load_dataset, load_dataset_with_taxonomy, load_taxonomy, save_dataset, save_taxonomy, split,
    Dataset, Instance,
};
use emem::encoder::{train_base_with_history, EncoderParams};
use emem::eval::{
    evaluate_base, evaluate_recording_usage, evaluate_with_threads, few_shot_report, sweep_eta, sweep_to_text,
    utilization_report, utilization_to_text, MetricsReport,
};
use emem::memory::{bank_stats, implant_with_threads, load_banks, save_banks};
use emem::ndt::{load_model, save_model, train_ndt, EMemNdtModel, Predictor};
use emem::tree::{build_tree, fallback_embeddings, load_label_embeddings, load_tree, save_tree};
use serde::Serialize;
use tracing::{debug, info, warn};

use crate::config::RunConfig;
use crate::{CliError, Command, Common, DataArgs, Format, Partition};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, out, per_class } => gen_data(&common, out, per_class),
        Command::TrainBase {
            common,
            data,
            partition,
            epochs,
            out,
        } => train_base(&common, &data, partition, epochs, out),
        Command::BuildTree {
            common,
            taxonomy,
            embeddings,
            linkage,
            out,
        } => build(&common, taxonomy, embeddings, linkage, out),
        Command::Implant {
            common,
            data,
            partition,
            encoder,
            tree,
            eta,
            out,
        } => implant(&common, &data, partition, encoder, tree, eta, out),
        Command::TrainNdt {
            common,
            data,
            partition,
            encoder,
            tree,
            banks,
            rho,
            epochs,
            out,
        } => train_tree(&common, &data, partition, [encoder, tree, banks], rho, epochs, out),
        Command::Predict {
            common,
            model,
            encoder,
            instance,
            out,
        } => predict(&common, model, encoder, &instance, out, false),
        Command::Explain {
            common,
            model,
            encoder,
            instance,
            out,
        } => predict(&common, model, encoder, &instance, out, true),
        Command::Eval {
            common,
            data,
            partition,
            model,
            encoder,
            base,
            format,
            confusion,
            usage_out,
            few_shot,
            out,
        } => eval(
            &common,
            &data,
            partition,
            EvalArgs {
                model,
                encoder,
                base,
                format,
                confusion,
                usage_out,
                few_shot,
                out,
            },
        ),
        Command::SweepEta {
            common,
            data,
            encoder,
            tree,
            etas,
            format,
            out,
        } => sweep(&common, &data, encoder, tree, &etas, format, out),
    }
}

/// Config file (or defaults) with the shared flags applied on top.
fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    if let Some(threads) = common.threads {
        cfg.threads = threads;
    }
    cfg.propagate();
    Ok(cfg)
}

/// Flag value, else config value, else a usage error naming the flag.
fn pick(flag: Option<PathBuf>, configured: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| CliError::Usage(format!("missing --{name} (or paths.{} in the config)", name.replace('-', "_"))))
}

fn require_inputs(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(CliError::data(format!("input {} does not exist", p.display())));
        }
    }
    Ok(())
}

/// Refuses to clobber existing files without `--force` and never lets an
/// output alias an input.
fn check_outputs(outputs: &[&Path], inputs: &[&Path], force: bool) -> Result<()> {
    for out in outputs {
        if out.exists() {
            let same = |a: &Path| match (a.canonicalize(), out.canonicalize()) {
                (Ok(x), Ok(y)) => x == y,
                _ => false,
            };
            if inputs.iter().any(|i| same(i)) {
                return Err(CliError::Usage(format!("output {} is also an input", out.display())));
            }
            if !force {
                return Err(CliError::Usage(format!(
                    "{} exists; pass --force to overwrite",
                    out.display()
                )));
            }
        }
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            if !dir.is_dir() {
                return Err(CliError::data(format!("output directory {} does not exist", dir.display())));
            }
        }
    }
    Ok(())
}

/// Writes `text` to `out`, or to stdout when no path is given.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| CliError::data(format!("stdout: {e}")))
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| CliError::data(e.to_string()))
}

fn taxonomy_sibling(data: &Path) -> PathBuf {
    data.with_extension("taxonomy.json")
}

struct LoadedData {
    dataset: Dataset,
    inputs: Vec<PathBuf>,
}

fn load_data(cfg: &RunConfig, args: &DataArgs) -> Result<LoadedData> {
    let data = pick(args.data.clone(), &cfg.paths.data, "data")?;
    require_inputs(&[&data])?;
    let taxonomy = args.taxonomy.clone().or_else(|| cfg.paths.taxonomy.clone()).or_else(|| {
        let sibling = taxonomy_sibling(&data);
        sibling.is_file().then_some(sibling)
    });
    let dataset = match &taxonomy {
        Some(t) => {
            require_inputs(&[t])?;
            load_dataset_with_taxonomy(&data, cfg.frame_rate_hz, load_taxonomy(t)?)?
        }
        None => {
            warn!("no taxonomy file; using the labels present in {}", data.display());
            load_dataset(&data, cfg.frame_rate_hz)?
        }
    };
    info!(instances = dataset.len(), classes = dataset.taxonomy.len(), "loaded {}", data.display());
    Ok(LoadedData {
        dataset,
        inputs: [Some(data), taxonomy].into_iter().flatten().collect(),
    })
}

fn select(cfg: &RunConfig, args: &DataArgs, dataset: Dataset, partition: Partition) -> Result<Dataset> {
    if partition == Partition::All {
        return Ok(dataset);
    }
    let (train, test) = split_parts(cfg, args, &dataset)?;
    let part = if partition == Partition::Train { train } else { test };
    info!(instances = part.len(), "using the {} partition", format!("{partition:?}").to_lowercase());
    Ok(part)
}

fn split_parts(cfg: &RunConfig, args: &DataArgs, dataset: &Dataset) -> Result<(Dataset, Dataset)> {
    let fraction = args.train_fraction.unwrap_or(cfg.train_fraction);
    Ok(split(dataset, fraction, cfg.require_seed()?)?)
}

fn load_encoder(path: &Path) -> Result<EncoderParams> {
    Ok(EncoderParams::load(path)?)
}

fn gen_data(common: &Common, out: Option<PathBuf>, per_class: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    let seed = cfg.require_seed()?;
    let out = pick(out, &cfg.paths.data, "out")?;
    let taxonomy_out = taxonomy_sibling(&out);
    check_outputs(&[&out, &taxonomy_out], &[], common.force)?;
    if let Some(n) = per_class {
        cfg.synthetic.class_counts.values_mut().for_each(|c| *c = n);
    }
    let dataset = generate_synthetic(&cfg.synthetic, seed)?;
    save_dataset(&dataset, &out)?;
    save_taxonomy(&dataset.taxonomy, &taxonomy_out)?;
    info!(
        instances = dataset.len(),
        "wrote {} and {}",
        out.display(),
        taxonomy_out.display()
    );
    Ok(())
}

fn train_base(
    common: &Common,
    args: &DataArgs,
    partition: Partition,
    epochs: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    cfg.require_seed()?;
    if let Some(e) = epochs {
        cfg.base_train.epochs = e;
    }
    let out = pick(out, &cfg.paths.encoder, "out")?;
    let loaded = load_data(&cfg, args)?;
    check_outputs(&[&out], &refs(&loaded.inputs), common.force)?;
    let train = select(&cfg, args, loaded.dataset, partition)?;
    let (params, history) = train_base_with_history(&train, &cfg.base_train, &cfg.encoder)?;
    for (epoch, loss) in history.epoch_loss.iter().enumerate() {
        debug!(epoch, loss, "base epoch");
    }
    if let Some(loss) = history.epoch_loss.last() {
        info!(final_loss = loss, "base encoder trained");
    }
    params.save(&out)?;
    info!("wrote {}", out.display());
    Ok(())
}

fn build(
    common: &Common,
    taxonomy: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    linkage: Option<emem::tree::Linkage>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let taxonomy = pick(taxonomy, &cfg.paths.taxonomy, "taxonomy")?;
    let embeddings = embeddings.or_else(|| cfg.paths.label_embeddings.clone());
    let out = pick(out, &cfg.paths.tree, "out")?;
    let inputs: Vec<PathBuf> = [Some(taxonomy.clone()), embeddings.clone()].into_iter().flatten().collect();
    require_inputs(&refs(&inputs))?;
    check_outputs(&[&out], &refs(&inputs), common.force)?;
    let tax = load_taxonomy(&taxonomy)?;
    let vectors = match &embeddings {
        Some(path) => load_label_embeddings(path, &tax)?,
        None => fallback_embeddings(&tax, cfg.tree.embedding_width, cfg.tree.embedding_seed)?,
    };
    let tree = build_tree(&vectors, linkage.unwrap_or(cfg.tree.linkage))?;
    save_tree(&tree, &out)?;
    info!(leaves = tree.leaf_count(), "wrote {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn implant(
    common: &Common,
    args: &DataArgs,
    partition: Partition,
    encoder: Option<PathBuf>,
    tree: Option<PathBuf>,
    eta: Option<f64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let encoder = pick(encoder, &cfg.paths.encoder, "encoder")?;
    let tree = pick(tree, &cfg.paths.tree, "tree")?;
    let out = pick(out, &cfg.paths.banks, "out")?;
    require_inputs(&[&encoder, &tree])?;
    let loaded = load_data(&cfg, args)?;
    let mut inputs = loaded.inputs.clone();
    inputs.extend([encoder.clone(), tree.clone()]);
    check_outputs(&[&out], &refs(&inputs), common.force)?;
    let train = select(&cfg, args, loaded.dataset, partition)?;
    let params = load_encoder(&encoder)?;
    let tree = load_tree(&tree)?;
    let eta = eta.unwrap_or(cfg.eta);
    let banks = implant_with_threads(&train, &params, &tree, eta, cfg.threads)?;
    for leaf in bank_stats(&banks).leaves {
        debug!(leaf = leaf.leaf_id, label = leaf.label, size = leaf.prototypes, "bank");
    }
    save_banks(&banks, &out)?;
    info!(eta, total = banks.total(), "wrote {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_tree(
    common: &Common,
    args: &DataArgs,
    partition: Partition,
    [encoder, tree, banks]: [Option<PathBuf>; 3],
    rho: Option<f64>,
    epochs: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    cfg.require_seed()?;
    if let Some(r) = rho {
        cfg.ndt.rho = r;
    }
    if let Some(e) = epochs {
        cfg.ndt_train.epochs = e;
    }
    let encoder = pick(encoder, &cfg.paths.encoder, "encoder")?;
    let tree = pick(tree, &cfg.paths.tree, "tree")?;
    let banks = pick(banks, &cfg.paths.banks, "banks")?;
    let out = pick(out, &cfg.paths.model, "out")?;
    require_inputs(&[&encoder, &tree, &banks])?;
    let loaded = load_data(&cfg, args)?;
    let mut inputs = loaded.inputs.clone();
    inputs.extend([encoder.clone(), tree.clone(), banks.clone()]);
    check_outputs(&[&out], &refs(&inputs), common.force)?;
    let train = select(&cfg, args, loaded.dataset, partition)?;
    let params = load_encoder(&encoder)?;
    let model = EMemNdtModel::for_encoder(load_tree(&tree)?, load_banks(&banks)?, &params, cfg.ndt.clone())?;
    let model = train_ndt(&model, &train, &params, &cfg.ndt_train)?;
    save_model(&model, &out)?;
    info!("wrote {}", out.display());
    Ok(())
}

fn read_instances(path: &Path) -> Result<Vec<Instance>> {
    let file = File::open(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut instances = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| CliError::data(format!("{}:{}: {msg}", path.display(), i + 1));
        let inst: Instance = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        inst.validate().map_err(|e| at(e.to_string()))?;
        instances.push(inst);
    }
    Ok(instances)
}

#[derive(Serialize)]
struct Prediction<'a> {
    instance_id: &'a str,
    predicted_label: &'a str,
    probability: f64,
    leaf_probabilities: Vec<LeafProbability<'a>>,
}

#[derive(Serialize)]
struct LeafProbability<'a> {
    label: &'a str,
    probability: f64,
}

fn load_model_pair(cfg: &RunConfig, model: Option<PathBuf>, encoder: Option<PathBuf>) -> Result<(EMemNdtModel, EncoderParams, [PathBuf; 2])> {
    let model = pick(model, &cfg.paths.model, "model")?;
    let encoder = pick(encoder, &cfg.paths.encoder, "encoder")?;
    require_inputs(&[&model, &encoder])?;
    let params = load_encoder(&encoder)?;
    let loaded = load_model(&model)?;
    loaded.check_encoder(&params)?;
    Ok((loaded, params, [model, encoder]))
}

fn predict(
    common: &Common,
    model: Option<PathBuf>,
    encoder: Option<PathBuf>,
    instances: &Path,
    out: Option<PathBuf>,
    explain: bool,
) -> Result<()> {
    let cfg = load_config(common)?;
    require_inputs(&[instances])?;
    let (model, params, [model_path, encoder_path]) = load_model_pair(&cfg, model, encoder)?;
    if let Some(out) = &out {
        check_outputs(&[out], &[&model_path, &encoder_path, instances], common.force)?;
    }
    let predictor = Predictor::new(&model)?;
    let tree = model.tree();
    let mut text = String::new();
    for inst in read_instances(instances)? {
        let g = params.embed(&inst)?.g;
        let line = if explain {
            let trace = predictor.explain(&inst.instance_id, &g)?;
            serde_json::to_string(&trace)
        } else {
            let (leaf, dist) = predictor.predict(&g)?;
            serde_json::to_string(&Prediction {
                instance_id: &inst.instance_id,
                predicted_label: tree.leaf_label(leaf),
                probability: dist.s[leaf],
                leaf_probabilities: (0..dist.s.len())
                    .map(|m| LeafProbability {
                        label: tree.leaf_label(m),
                        probability: dist.s[m],
                    })
                    .collect(),
            })
        }
        .map_err(|e| CliError::data(e.to_string()))?;
        text.push_str(&line);
        text.push('\n');
    }
    emit(out.as_deref(), &text)
}

struct EvalArgs {
    model: Option<PathBuf>,
    encoder: Option<PathBuf>,
    base: bool,
    format: Format,
    confusion: Option<PathBuf>,
    usage_out: Option<PathBuf>,
    few_shot: Vec<String>,
    out: Option<PathBuf>,
}

fn eval(common: &Common, args: &DataArgs, partition: Partition, e: EvalArgs) -> Result<()> {
    let cfg = load_config(common)?;
    if e.base && e.usage_out.is_some() {
        return Err(CliError::Usage("--usage-out needs a tree model, not --base".into()));
    }
    let loaded = load_data(&cfg, args)?;
    let mut inputs = loaded.inputs.clone();
    let (model, params) = if e.base {
        let encoder = pick(e.encoder, &cfg.paths.encoder, "encoder")?;
        require_inputs(&[&encoder])?;
        let params = load_encoder(&encoder)?;
        inputs.push(encoder);
        (None, params)
    } else {
        let (model, params, paths) = load_model_pair(&cfg, e.model, e.encoder)?;
        inputs.extend(paths);
        (Some(model), params)
    };
    let outputs: Vec<&Path> = [&e.out, &e.confusion, &e.usage_out].into_iter().flatten().map(PathBuf::as_path).collect();
    check_outputs(&outputs, &refs(&inputs), common.force)?;
    let test = select(&cfg, args, loaded.dataset, partition)?;
    let (confusion, report) = match model {
        None => evaluate_base(&params, &test, cfg.threads)?,
        Some(mut model) => match &e.usage_out {
            Some(path) => {
                model.banks_mut().reset_usage();
                let result = evaluate_recording_usage(&mut model, &params, &test, cfg.threads)?;
                save_model(&model, path)?;
                info!("wrote usage counts to {}", path.display());
                match utilization_report(&model) {
                    Ok(rows) => eprint!("{}", utilization_to_text(&rows)),
                    Err(err) => warn!("{err}"),
                }
                result
            }
            None => evaluate_with_threads(&model, &params, &test, cfg.threads)?,
        },
    };
    info!(macro_f1 = report.macro_avg.f1, accuracy = report.accuracy, "evaluated");
    if !e.few_shot.is_empty() {
        few_shot_lines(&report, &e.few_shot)?;
    }
    if let Some(path) = &e.confusion {
        std::fs::write(path, confusion.to_csv()).map_err(|err| CliError::data(format!("{}: {err}", path.display())))?;
    }
    let text = match e.format {
        Format::Json => report.to_json()? + "\n",
        Format::Text => report.to_text(),
    };
    emit(e.out.as_deref(), &text)
}

fn few_shot_lines(report: &MetricsReport, labels: &[String]) -> Result<()> {
    for c in few_shot_report(report, labels)? {
        info!(
            label = c.label,
            precision = c.precision,
            recall = c.recall,
            f1 = c.f1,
            support = c.support,
            "few-shot class"
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    common: &Common,
    args: &DataArgs,
    encoder: Option<PathBuf>,
    tree: Option<PathBuf>,
    etas: &[f64],
    format: Format,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(common)?;
    cfg.require_seed()?;
    let encoder = pick(encoder, &cfg.paths.encoder, "encoder")?;
    let tree = pick(tree, &cfg.paths.tree, "tree")?;
    require_inputs(&[&encoder, &tree])?;
    let loaded = load_data(&cfg, args)?;
    let mut inputs = loaded.inputs.clone();
    inputs.extend([encoder.clone(), tree.clone()]);
    if let Some(out) = &out {
        check_outputs(&[out], &refs(&inputs), common.force)?;
    }
    let (train, test) = split_parts(&cfg, args, &loaded.dataset)?;
    let params = load_encoder(&encoder)?;
    let tree = load_tree(&tree)?;
    let rows = sweep_eta(&train, &test, &params, &tree, etas, &cfg.ndt, &cfg.ndt_train)?;
    let text = match format {
        Format::Json => to_json(&rows)?,
        Format::Text => sweep_to_text(&rows),
    };
    emit(out.as_deref(), &text)
}

fn refs(paths: &[PathBuf]) -> Vec<&Path> {
    paths.iter().map(PathBuf::as_path).collect()
}
