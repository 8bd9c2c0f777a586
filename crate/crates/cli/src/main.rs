mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, Parser, Subcommand};

use dfw_core::chain::{self, KeyRegistry};
use dfw_core::consensus;
use dfw_core::dataset::{self, Label};
use dfw_core::dbn::{self, DbnModel};
use dfw_core::imgcodec::{self, InputVector, DEFAULT_INPUT_SIDE};
use dfw_core::netsim;

use config::{parse_arch, AppConfig};

const EXIT_FAILURE: u8 = 1;
const EXIT_INVARIANT: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(name = "dfw", version, about = "Byteplot DBN malware scoring with a trust-weighted verdict chain")]
struct Cli {
    /// key = value configuration file; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a file as a downscaled byteplot PGM image
    Convert {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_INPUT_SIDE)]
        size: usize,
    },
    /// Write the synthetic two-texture corpus and its manifest
    SynthData {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// also write train.tsv / test.tsv split at this fraction
        #[arg(long)]
        train_fraction: Option<f64>,
    },
    /// Pretrain and fine-tune a detection engine on a manifest
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy and TPR of a model over a manifest
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Malicious probability of one file
    Classify {
        #[arg(long)]
        model: PathBuf,
        file: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train one engine per node and write models, keys and the genesis chain
    Provision {
        #[command(flatten)]
        net: NetFlags,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Provision a network and run a broadcast scenario through it
    Simulate {
        #[command(flatten)]
        net: NetFlags,
        #[arg(long)]
        scenario: PathBuf,
        /// transcript destination (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        chain_out: Option<PathBuf>,
        #[arg(long)]
        keys_out: Option<PathBuf>,
    },
    /// Chain log operations
    Chain {
        #[command(subcommand)]
        op: ChainOp,
    },
    /// Same as `chain verify`
    ChainVerify(VerifyArgs),
}

#[derive(Debug, Subcommand)]
enum ChainOp {
    /// Check hashes, proof of work, links and verdict tags
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
struct VerifyArgs {
    file: PathBuf,
    /// node key file (`<node_id> <hex key>` per line)
    #[arg(long)]
    keys: PathBuf,
    /// required difficulty; defaults to the one recorded in the log
    #[arg(long)]
    difficulty: Option<u32>,
}

#[derive(Debug, Args)]
struct ModelFlags {
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    pretrain_epochs: Option<u32>,
    #[arg(long)]
    finetune_epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct NetFlags {
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    n_nodes: Option<usize>,
    #[arg(long)]
    difficulty: Option<u32>,
    #[arg(long)]
    threshold: Option<f64>,
}

enum Failure {
    Usage(String),
    Operational(String),
    Invariant(String),
}

type CmdResult = Result<(), Failure>;

fn op<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> Failure {
    move |e| Failure::Operational(format!("{context}: {e}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    ExitCode::SUCCESS
                }
                _ => {
                    let _ = e.print();
                    ExitCode::from(EXIT_USAGE)
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Operational(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_FAILURE)
        }
        Err(Failure::Invariant(m)) => {
            eprintln!("invariant violation: {m}");
            ExitCode::from(EXIT_INVARIANT)
        }
    }
}

fn base_config(path: Option<&Path>) -> Result<AppConfig, Failure> {
    match path {
        Some(p) => AppConfig::load(p).map_err(|e| Failure::Usage(e.to_string())),
        None => Ok(AppConfig::default()),
    }
}

fn apply_model_flags(cfg: &mut AppConfig, f: &ModelFlags) -> Result<(), Failure> {
    if let Some(a) = &f.arch {
        cfg.arch = parse_arch(a).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    if let Some(v) = f.pretrain_epochs {
        cfg.pretrain_epochs = v;
    }
    if let Some(v) = f.finetune_epochs {
        cfg.finetune_epochs = v;
    }
    if let Some(v) = f.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
    Ok(())
}

fn apply_net_flags(cfg: &mut AppConfig, f: &NetFlags) -> Result<(), Failure> {
    apply_model_flags(cfg, &f.model)?;
    if let Some(v) = f.n_nodes {
        cfg.n_nodes = v;
    }
    if let Some(v) = f.difficulty {
        cfg.difficulty = v;
    }
    if let Some(v) = f.threshold {
        cfg.threshold = v;
    }
    Ok(())
}

fn validated(cfg: AppConfig) -> Result<AppConfig, Failure> {
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn stdout_write(text: &str) -> CmdResult {
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes()).and_then(|_| out.flush()).map_err(op("stdout"))
}

fn run(cli: Cli) -> CmdResult {
    let mut cfg = base_config(cli.config.as_deref())?;
    match cli.command {
        Command::Convert { input, out, size } => {
            if size == 0 {
                return Err(Failure::Usage("--size must be at least 1".into()));
            }
            let bytes = fs::read(&input).map_err(op(input.display()))?;
            let img = imgcodec::bytes_to_image(&bytes).map_err(op(input.display()))?;
            let small = imgcodec::downscale(&img, size, size).map_err(op("downscale"))?;
            let file = fs::File::create(&out).map_err(op(out.display()))?;
            small.write_pgm(io::BufWriter::new(file)).map_err(op(out.display()))?;
            stdout_write(&format!("{}\t{}x{}\n", out.display(), size, size))
        }
        Command::SynthData { out_dir, per_class, seed, train_fraction } => {
            if per_class == 0 {
                return Err(Failure::Usage("--per-class must be at least 1".into()));
            }
            let seed = seed.unwrap_or(cfg.seed);
            let manifest = dataset::write_synthetic_corpus(&out_dir, per_class, seed).map_err(op(out_dir.display()))?;
            if let Some(frac) = train_fraction {
                let (train, test) = dataset::split(&manifest, frac, seed).map_err(|e| Failure::Usage(e.to_string()))?;
                train.write(out_dir.join("train.tsv")).map_err(op("train.tsv"))?;
                test.write(out_dir.join("test.tsv")).map_err(op("test.tsv"))?;
            }
            stdout_write(&format!(
                "{}\t{}\n",
                out_dir.join(dataset::MANIFEST_FILE).display(),
                manifest.len()
            ))
        }
        Command::Train { manifest, model, out } => {
            apply_model_flags(&mut cfg, &model)?;
            let cfg = validated(cfg)?;
            let m = dataset::load_manifest(&manifest).map_err(op(manifest.display()))?;
            if m.is_empty() {
                return Err(Failure::Operational(format!("{}: manifest is empty", manifest.display())));
            }
            let data = dataset::load_inputs(&m, cfg.input_side()).map_err(op("loading corpus"))?;
            let data: Vec<(InputVector, usize)> = data.into_iter().map(|(x, l)| (x, l.class_index())).collect();
            let trained = dbn::train(&cfg.dbn_arch(), &data).map_err(op("training"))?;
            dbn::save_model(&trained, &out).map_err(op(out.display()))?;
            stdout_write(&format!(
                "model\t{}\nparams\t{}\n",
                out.display(),
                hex::encode(trained.parameter_digest())
            ))
        }
        Command::Eval { model, manifest, threshold } => {
            if let Some(t) = threshold {
                cfg.threshold = t;
            }
            let cfg = validated(cfg)?;
            let model = load_model(&model)?;
            let m = dataset::load_manifest(&manifest).map_err(op(manifest.display()))?;
            let report = dataset::evaluate(&model, &m, cfg.threshold).map_err(op("evaluation"))?;
            for (path, why) in &report.failures {
                eprintln!("warning: skipped {}: {why}", path.display());
            }
            stdout_write(&report.render())
        }
        Command::Classify { model, file, threshold } => {
            if let Some(t) = threshold {
                cfg.threshold = t;
            }
            let cfg = validated(cfg)?;
            let model = load_model(&model)?;
            let side = dataset::input_side(&model)
                .ok_or_else(|| Failure::Operational("model input is not a square image".into()))?;
            let bytes = fs::read(&file).map_err(op(file.display()))?;
            let x = imgcodec::file_to_input(&bytes, side).map_err(op(file.display()))?;
            let p = dbn::predict_malicious(&model, &x).map_err(op("inference"))?;
            stdout_write(&format!("{p:.6}\t{}\n", consensus::decide(p, cfg.threshold)))
        }
        Command::Provision { net, out_dir } => {
            apply_net_flags(&mut cfg, &net)?;
            let cfg = validated(cfg)?;
            let network = provision(&cfg)?;
            fs::create_dir_all(&out_dir).map_err(op(out_dir.display()))?;
            let mut summary = String::new();
            for node in &network.nodes {
                let path = out_dir.join(format!("{}.dbn", node.node_id));
                dbn::save_model(&node.model, &path).map_err(op(path.display()))?;
                summary.push_str(&format!(
                    "{}\t{}\t{}\n",
                    node.node_id,
                    node.fault,
                    hex::encode(node.model.parameter_digest())
                ));
            }
            write_file(&out_dir.join("keys.txt"), network.registry.to_text().as_bytes())?;
            write_file(&out_dir.join("chain.bin"), &network.chain.encode())?;
            stdout_write(&summary)
        }
        Command::Simulate { net, scenario, out, chain_out, keys_out } => {
            apply_net_flags(&mut cfg, &net)?;
            let cfg = validated(cfg)?;
            let text = fs::read_to_string(&scenario).map_err(op(scenario.display()))?;
            let events = netsim::parse_scenario(&text, scenario.parent()).map_err(|e| Failure::Usage(e.to_string()))?;
            let mut network = provision(&cfg)?;
            let transcript = network.run_scenario(&events).map_err(op("simulation"))?;

            if let Some(p) = &chain_out {
                write_file(p, &network.chain.encode())?;
            }
            if let Some(p) = &keys_out {
                write_file(p, network.registry.to_text().as_bytes())?;
            }
            let rendered = transcript.render();
            match &out {
                Some(p) => write_file(p, rendered.as_bytes())?,
                None => stdout_write(&rendered)?,
            }

            let verdict = network.chain.verify(&network.registry);
            if !verdict.valid {
                return Err(Failure::Invariant(format!(
                    "chain invalid at block {}",
                    verdict.first_bad_index.unwrap_or(0)
                )));
            }
            let ids: Vec<String> = network.nodes.iter().map(|n| n.node_id.clone()).collect();
            let audited = netsim::audit_means(network.chain.blocks(), cfg.network().trust, &ids)
                .map_err(|e| Failure::Invariant(e.to_string()))?;
            let live: Vec<f64> = transcript.rounds.iter().map(|r| r.mean).collect();
            if audited != live {
                return Err(Failure::Invariant("consensus means disagree with the chain audit".into()));
            }
            Ok(())
        }
        Command::Chain { op: ChainOp::Verify(args) } | Command::ChainVerify(args) => verify_chain_file(&args),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    fs::write(path, bytes).map_err(op(path.display()))
}

fn load_model(path: &Path) -> Result<DbnModel, Failure> {
    dbn::load_model(path).map_err(op(path.display()))
}

fn provision(cfg: &AppConfig) -> Result<netsim::Network, Failure> {
    let side = cfg.input_side();
    let data: Vec<(InputVector, Label)> = match &cfg.train_manifest {
        Some(path) => {
            let m = dataset::load_manifest(path).map_err(op(path.display()))?;
            dataset::load_inputs(&m, side).map_err(op("loading corpus"))?
        }
        None => dataset::synthetic_inputs(cfg.synthetic_per_class, cfg.seed, side),
    };
    let data: Vec<(InputVector, usize)> = data.into_iter().map(|(x, l)| (x, l.class_index())).collect();
    netsim::provision(&cfg.network(), &data).map_err(op("provisioning"))
}

fn verify_chain_file(args: &VerifyArgs) -> CmdResult {
    let bytes = fs::read(&args.file).map_err(op(args.file.display()))?;
    let keys_text = fs::read_to_string(&args.keys).map_err(op(args.keys.display()))?;
    let registry = KeyRegistry::parse(&keys_text).map_err(|e| Failure::Usage(format!("{}: {e}", args.keys.display())))?;
    let decoded = match chain::decode_chain(&bytes) {
        Ok(d) => d,
        Err(e) => {
            stdout_write("invalid\t0\n")?;
            return Err(Failure::Operational(format!("{}: {e}", args.file.display())));
        }
    };
    let verdict = decoded.verify(&registry, args.difficulty);
    match verdict.first_bad_index {
        None => stdout_write(&format!("valid\t{}\n", decoded.blocks.len())),
        Some(i) => {
            stdout_write(&format!("invalid\t{i}\n"))?;
            Err(Failure::Operational(format!("chain fails verification at block {i}")))
        }
    }
}
