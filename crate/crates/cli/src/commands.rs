//! Subcommand implementations behind the `splitcvr` binary.
//!
//! Exit-code contract: 0 success, 1 command-line misuse, 2 runtime failure.
//! Every run writes `manifest.json` (and the resolved `config.json`) into
//! its `--out` directory; a manifest whose status is not "complete" marks
//! partial outputs.

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use splitcvr_core::cleanroom::{CleanRoom, ServerPolicy};
use splitcvr_core::datagen::{self, Dataset};
use splitcvr_core::metrics::{self, EvalReport};
use splitcvr_core::model::AdapterConfig;
use splitcvr_core::rng;
use splitcvr_core::audit;
use splitcvr_core::wire::{SessionConfig, PROTOCOL_VERSION};

use crate::client::CommReport;
use crate::config::{self, dp_mode, parse_codec, parse_domain};
use crate::files;
use crate::manifest;
use crate::training::{self, LabelTreatment, TrainSettings, Trainable};
use crate::transport::TcpTransport;
use crate::usage_error;

pub const FEATURES_FILE: &str = "features.bin";
pub const LABELS_FILE: &str = "labels.csv";
pub const MODEL_FILE: &str = "model.bin";
pub const REPORT_FILE: &str = "report.json";

#[derive(Parser)]
#[command(
    name = "splitcvr",
    version,
    about = "Two-party split training for conversion models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic conversion dataset: feature file plus label CSV.
    GenData(ConfigArgs),
    /// Train a base network on pretraining data and freeze it.
    Pretrain(ConfigArgs),
    /// Host the clean room: join labels, return aggregated gradients.
    ServeCleanroom(ServeArgs),
    /// Fine-tune an adapter over the split protocol.
    SplitTrain(SplitTrainArgs),
    /// Label-holding oracle trainer (adapter or all parameters).
    LocalTrain(ConfigArgs),
    /// Score a model checkpoint against a labeled dataset.
    Eval(EvalArgs),
    /// Sweep the label-recovery attack across batch/parameter regimes.
    AuditLeakage(ConfigArgs),
    /// Collate manifests and reports from previous runs.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct ConfigArgs {
    /// JSON experiment config.
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config key, dotted paths allowed: --set optimizer.lr=0.1
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory for the manifest and all run outputs.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ServeArgs {
    /// Label CSV (`sample_id,label`). The only data file this process reads.
    #[arg(long)]
    pub labels: PathBuf,
    /// Listen address, e.g. 127.0.0.1:7001 (port 0 picks one).
    #[arg(long)]
    pub listen: String,
    /// Optional policy config (epsilon, dp_seed, session limits).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SplitTrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// `tcp:HOST:PORT` to reach a clean-room server, or `loopback` to host
    /// one in-process (simulation; needs --labels).
    #[arg(long)]
    pub transport: String,
    /// Label CSV for the in-process clean room. Loopback only: over TCP the
    /// labels stay with the server and this process never touches them.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory holding features.bin and labels.csv.
    #[arg(long)]
    pub data: PathBuf,
    /// Adapter to route through; omit to score the bare base network.
    #[arg(long)]
    pub adapter: Option<String>,
    /// Report path; defaults to report.json under --out.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Run directories to collate (each holding a manifest.json).
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::Pretrain(a) => pretrain(&a),
        Command::ServeCleanroom(a) => serve_cleanroom(&a),
        Command::SplitTrain(a) => split_train(&a),
        Command::LocalTrain(a) => local_train(&a),
        Command::Eval(a) => eval(&a),
        Command::AuditLeakage(a) => audit_leakage(&a),
        Command::Report(a) => report(&a),
    }
}

fn resolved_config<T: serde::de::DeserializeOwned + serde::Serialize>(
    args: &ConfigArgs,
) -> Result<(T, Value)> {
    let cfg: T = config::load(&args.config, &args.set)?;
    let value = serde_json::to_value(&cfg)?;
    Ok((cfg, value))
}

fn gen_data(args: &ConfigArgs) -> Result<()> {
    let (cfg, resolved) = resolved_config::<config::GenDataConfig>(args)?;
    manifest::with_manifest("gen-data", &args.out, Some(&resolved), |run| {
        let gen_cfg = datagen::GeneratorConfig {
            seed: cfg.seed,
            n: cfg.n,
            d: cfg.d,
            teacher_hidden: cfg.teacher_hidden.clone(),
            base_rate: cfg.base_rate,
            domain_shift: cfg.domain_shift,
            domain: parse_domain(&cfg.domain)?,
        };
        let ds = datagen::generate(&gen_cfg)?;
        let digest = datagen::hex(&datagen::dataset_digest(&ds)?);
        files::write_features(&run.output(FEATURES_FILE), &ds.features)?;
        files::write_labels(&run.output(LABELS_FILE), &ds.features.ids, &ds.labels)?;
        run.note(
            "dataset",
            json!({
                "digest": digest,
                "n": ds.len(),
                "positive_rate": ds.positive_rate(),
            }),
        );
        println!("dataset digest {digest} (n={}, rate={:.4})", ds.len(), ds.positive_rate());
        Ok(())
    })
}

/// Load features and labels into one dataset, joining labels by sample id.
pub fn load_dataset(features: &Path, labels: &Path) -> Result<Dataset> {
    let fs = files::read_features(features)?;
    let mut by_id: BTreeMap<u64, u8> = BTreeMap::new();
    for (id, y) in files::read_label_pairs(labels)? {
        if by_id.insert(id, y).is_some() {
            bail!("duplicate sample id {id} in {}", labels.display());
        }
    }
    let labels: Vec<u8> = fs
        .ids
        .iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .with_context(|| format!("no label for sample id {id}"))
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        features: fs,
        labels,
    })
}

fn train_settings(optimizer: &config::OptimizerSpec, batch_size: usize, epochs: u64, seed: u64, record_loss: bool) -> Result<TrainSettings> {
    Ok(TrainSettings {
        optimizer: optimizer.build()?,
        batch_size,
        epochs,
        seed,
        record_loss,
    })
}

fn pretrain(args: &ConfigArgs) -> Result<()> {
    let (cfg, resolved) = resolved_config::<config::PretrainConfig>(args)?;
    manifest::with_manifest("pretrain", &args.out, Some(&resolved), |run| {
        let data = load_dataset(Path::new(&cfg.features), Path::new(&cfg.labels))?;
        let settings = train_settings(&cfg.optimizer, cfg.batch_size, cfg.epochs, cfg.seed, cfg.loss_curve)?;
        let (model, report) = training::pretrain(&cfg.hidden, &data, &settings, cfg.seed)?;
        files::write_model(&run.output(MODEL_FILE), &model)?;
        files::write_json(&run.output(REPORT_FILE), &report.to_json())?;
        println!(
            "pretrained {} steps, params {}, checksum {}",
            report.steps,
            model.base_param_count(),
            &report.param_checksum[..12]
        );
        Ok(())
    })
}

fn serve_cleanroom(args: &ServeArgs) -> Result<()> {
    let cfg: config::ServePolicyConfig = match &args.config {
        Some(path) => config::load(path, &args.set)?,
        None => config::from_sets(&args.set)?,
    };
    let resolved = json!({
        "epsilon": cfg.epsilon,
        "debias": cfg.debias,
        "dp_seed": cfg.dp_seed,
        "allow_report_loss": cfg.allow_report_loss.unwrap_or(true),
        "expected_param_count": cfg.expected_param_count,
        "sessions": cfg.sessions,
    });
    manifest::with_manifest("serve-cleanroom", &args.out, Some(&resolved), |run| {
        let store = files::read_label_store(&args.labels)?;
        let policy = ServerPolicy {
            dp: dp_mode(cfg.epsilon, cfg.debias),
            dp_seed: cfg.dp_seed,
            expected_param_count: cfg.expected_param_count,
            expected_signature: None,
            allow_report_loss: cfg.allow_report_loss.unwrap_or(true),
        };
        let room = CleanRoom::new(store, policy)?;
        let listener = TcpListener::bind(&args.listen)
            .with_context(|| format!("bind {}", args.listen))?;
        let addr = listener.local_addr()?;
        run.note("listen", json!(addr.to_string()));
        // The line test harnesses and scripts wait for; flush so they see it
        // before the first session lands.
        println!("listening on {addr}");
        use std::io::Write;
        std::io::stdout().flush().ok();
        crate::server::serve(listener, room, cfg.sessions)?;
        Ok(())
    })
}

fn attach_if_missing(
    model: &mut splitcvr_core::model::AdaptedModel,
    spec: &config::AdapterSpec,
    seed: u64,
) -> Result<()> {
    if model.adapter_ids().any(|id| id == spec.id) {
        return Ok(());
    }
    model.attach_adapter(
        &AdapterConfig {
            id: spec.id.clone(),
            rank: spec.rank,
            alpha: spec.alpha,
            layers: spec.layers.clone(),
        },
        // Deterministic in the run seed so reruns rebuild the same init.
        rng::mix(seed, 0x6164_6170),
    )?;
    Ok(())
}

fn split_train(args: &SplitTrainArgs) -> Result<()> {
    let (cfg, resolved) = resolved_config::<config::SplitTrainConfig>(&args.common)?;
    manifest::with_manifest("split-train", &args.common.out, Some(&resolved), |run| {
        run.note(
            "flags",
            json!({"transport": args.transport, "labels": args.labels.as_ref().map(|p| p.display().to_string())}),
        );
        let mut model = files::read_model(Path::new(&cfg.model))?;
        model.freeze();
        attach_if_missing(&mut model, &cfg.adapter, cfg.seed)?;
        let features = files::read_features(Path::new(&cfg.features))?;
        let settings = train_settings(&cfg.optimizer, cfg.batch_size, cfg.epochs, cfg.seed, cfg.loss_curve)?;
        let session = SessionConfig {
            protocol_version: PROTOCOL_VERSION,
            batch_size: 0,
            param_count: 0,
            codec: parse_codec(&cfg.codec)?,
            dp: dp_mode(cfg.epsilon, cfg.debias),
            report_loss: cfg.report_loss,
            seed: 0,
            model_signature: [0; 32],
            wide_wire: cfg.wide_wire,
        };
        let (report, comm) = match args.transport.as_str() {
            "loopback" => {
                let labels = args.labels.as_ref().ok_or_else(|| {
                    usage_error("--transport loopback needs --labels for the in-process clean room")
                })?;
                let store = files::read_label_store(labels)?;
                let policy = ServerPolicy {
                    dp: dp_mode(cfg.epsilon, cfg.debias),
                    dp_seed: cfg.dp_seed,
                    expected_param_count: None,
                    expected_signature: None,
                    allow_report_loss: true,
                };
                let room = CleanRoom::new(store, policy)?;
                training::split_train_loopback(
                    &mut model,
                    &cfg.adapter.id,
                    &features,
                    &settings,
                    session,
                    room,
                )?
            }
            t => match t.strip_prefix("tcp:") {
                Some(addr) => {
                    if args.labels.is_some() {
                        return Err(usage_error(
                            "--labels is only for loopback; over TCP the server holds them",
                        ));
                    }
                    let transport = TcpTransport::connect(addr)?;
                    training::split_train(
                        &mut model,
                        &cfg.adapter.id,
                        &features,
                        &settings,
                        session,
                        transport,
                    )?
                }
                None => {
                    return Err(usage_error(format!(
                        "unknown transport `{t}` (expected loopback or tcp:HOST:PORT)"
                    )))
                }
            },
        };
        files::write_model(&run.output(MODEL_FILE), &model)?;
        files::write_json(&run.output(REPORT_FILE), &report.to_json())?;
        files::write_json(&run.output("comm.json"), &comm_to_json(&comm))?;
        println!(
            "split-trained {} steps, up {} bytes, down {} bytes, checksum {}",
            report.steps, report.bytes_up, report.bytes_down, &report.param_checksum[..12]
        );
        Ok(())
    })
}

fn comm_to_json(comm: &CommReport) -> Value {
    json!({
        "bytes_up": comm.bytes_up,
        "bytes_down": comm.bytes_down,
        "batches": comm
            .batches
            .iter()
            .map(|b| json!({"batch_id": b.batch_id, "up": b.up, "down": b.down}))
            .collect::<Vec<_>>(),
    })
}

fn local_train(args: &ConfigArgs) -> Result<()> {
    let (cfg, resolved) = resolved_config::<config::LocalTrainConfig>(args)?;
    manifest::with_manifest("local-train", &args.out, Some(&resolved), |run| {
        let mut model = files::read_model(Path::new(&cfg.model))?;
        let data = load_dataset(Path::new(&cfg.features), Path::new(&cfg.labels))?;
        let trainable = match cfg.trainable.as_str() {
            "adapter" => {
                let spec = cfg
                    .adapter
                    .as_ref()
                    .ok_or_else(|| usage_error("trainable=adapter needs an adapter spec"))?;
                model.freeze();
                attach_if_missing(&mut model, spec, cfg.seed)?;
                Trainable::Adapter(spec.id.clone())
            }
            "all" => {
                if model.base().is_frozen() {
                    model = training::thaw_base(&model)?;
                }
                Trainable::AllParams
            }
            other => {
                return Err(usage_error(format!(
                    "unknown trainable `{other}` (expected adapter or all)"
                )))
            }
        };
        let treatment = if cfg.epsilon == 0.0 {
            LabelTreatment::Plain
        } else {
            LabelTreatment::Flipped {
                epsilon: cfg.epsilon,
                debias: cfg.debias,
                dp_seed: cfg.dp_seed,
            }
        };
        let settings = train_settings(&cfg.optimizer, cfg.batch_size, cfg.epochs, cfg.seed, cfg.loss_curve)?;
        let report = training::local_train(&mut model, &trainable, &data, &settings, &treatment)?;
        files::write_model(&run.output(MODEL_FILE), &model)?;
        files::write_json(&run.output(REPORT_FILE), &report.to_json())?;
        println!(
            "locally trained {} steps, checksum {}",
            report.steps, &report.param_checksum[..12]
        );
        Ok(())
    })
}

fn eval_to_json(r: &EvalReport) -> Value {
    json!({
        "n": r.n,
        "n_plus": r.n_plus,
        "n_minus": r.n_minus,
        "base_rate": r.base_rate,
        "auc": r.auc,
        "calibration_ratio": r.calibration_ratio,
        "log_loss": r.log_loss,
    })
}

fn eval(args: &EvalArgs) -> Result<()> {
    let flags = json!({
        "model": args.model.display().to_string(),
        "data": args.data.display().to_string(),
        "adapter": args.adapter,
    });
    manifest::with_manifest("eval", &args.out, Some(&flags), |run| {
        let model = files::read_model(&args.model)?;
        let data = load_dataset(
            &args.data.join(FEATURES_FILE),
            &args.data.join(LABELS_FILE),
        )?;
        let probs = training::predict(&model, args.adapter.as_deref(), &data.features)?;
        let report = metrics::evaluate(&probs, &data.labels)?;
        let path = match &args.report {
            Some(p) => p.clone(),
            None => run.output(REPORT_FILE),
        };
        files::write_json(&path, &eval_to_json(&report))?;
        println!(
            "auc {:.4}, calibration {:.3}, log loss {:.4} (n={})",
            report.auc, report.calibration_ratio, report.log_loss, report.n
        );
        Ok(())
    })
}

fn audit_leakage(args: &ConfigArgs) -> Result<()> {
    let (cfg, resolved) = resolved_config::<config::AuditConfig>(args)?;
    manifest::with_manifest("audit-leakage", &args.out, Some(&resolved), |run| {
        let rows = audit::leakage_sweep(
            &cfg.batch_sizes,
            &cfg.param_counts,
            parse_codec(&cfg.codec)?,
            dp_mode(cfg.epsilon, cfg.debias),
            cfg.trials,
            cfg.seed,
        )?;
        std::fs::write(run.output("sweep.csv"), audit::sweep_csv(&rows))?;
        let rows_json: Vec<Value> = rows
            .iter()
            .map(|r| {
                json!({
                    "batch_size": r.cell.batch_size,
                    "param_count": r.cell.param_count,
                    "accuracy": r.accuracy,
                    "mean_residual": r.mean_residual,
                    "majority_rate": r.majority_rate,
                })
            })
            .collect();
        files::write_json(&run.output("sweep.json"), &json!({ "rows": rows_json }))?;
        for r in &rows {
            println!(
                "b={} params={} accuracy={:.3} majority={:.3}",
                r.cell.batch_size, r.cell.param_count, r.accuracy, r.majority_rate
            );
        }
        Ok(())
    })
}

fn headline(m: &Value, dir: &Path) -> String {
    let report = files::read_json(&dir.join(REPORT_FILE)).ok();
    if let Some(r) = &report {
        if let Some(auc) = r["auc"].as_f64() {
            return format!("auc={auc:.4}");
        }
        if let Some(steps) = r["steps"].as_u64() {
            return format!("steps={steps} bytes_up={}", r["bytes_up"]);
        }
    }
    if let Some(ds) = m.get("dataset") {
        return format!("digest={}", ds["digest"].as_str().unwrap_or("?"));
    }
    String::new()
}

fn report(args: &ReportArgs) -> Result<()> {
    let flags = json!({
        "runs": args.runs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    manifest::with_manifest("report", &args.out, Some(&flags), |run| {
        let mut entries = Vec::new();
        for dir in &args.runs {
            let m = files::read_json(&dir.join("manifest.json"))
                .with_context(|| format!("no manifest in {}", dir.display()))?;
            let line = headline(&m, dir);
            println!(
                "{}\t{}\t{}\t{}",
                dir.display(),
                m["subcommand"].as_str().unwrap_or("?"),
                m["status"].as_str().unwrap_or("?"),
                line
            );
            let report = files::read_json(&dir.join(REPORT_FILE)).ok();
            entries.push(json!({
                "dir": dir.display().to_string(),
                "manifest": m,
                "report": report,
            }));
        }
        files::write_json(&run.output("summary.json"), &json!({ "runs": entries }))?;
        Ok(())
    })
}

/// Bytes one uplink batch frame occupies: header, then the fixed payload
/// fields (batch id, width flag, codec tag, cols, count), then ids, logits,
/// and the gradient payload.
pub fn forward_frame_len(batch: usize, grads_payload: usize, wide: bool) -> usize {
    let logit = if wide { 8 } else { 4 };
    splitcvr_core::wire::HEADER_LEN + 23 + batch * (8 + logit) + grads_payload
}

#[cfg(test)]
mod tests {
    use super::*;
    use splitcvr_core::compress::Codec;
    use splitcvr_core::wire::{encode_message, ForwardBatch, WireMessage};

    #[test]
    fn frame_len_formula_matches_an_encoded_frame() {
        let (b, cols) = (64usize, 512usize);
        let payload = Codec::F32.payload_len(b, cols);
        let msg = WireMessage::ForwardBatch(ForwardBatch {
            batch_id: 7,
            sample_ids: (0..b as u64).collect(),
            logits: vec![0.25; b],
            wide: false,
            codec: Codec::F32,
            cols: cols as u64,
            grads: vec![0; payload],
        });
        let encoded = encode_message(&msg).len();
        assert_eq!(encoded, forward_frame_len(b, payload, false));
        // 512 trainable parameters at batch 64 on the narrow wire.
        assert_eq!(encoded, 4 * 64 * 512 + 8 * 64 + 4 * 64 + 33);
    }
}
