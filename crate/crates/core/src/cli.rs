//! Command-line front end.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::{json, Map, Value};

use disp::budget::PruneBudget;
use disp::checkpoint::{
    dense_from_checkpoint, dense_to_checkpoint, file_sha256, gates_from_checkpoint, gates_to_checkpoint,
    hypernet_from_checkpoint, hypernet_to_checkpoint, model_hash, pruned_from_checkpoint,
    pruned_to_checkpoint, Checkpoint,
};
use disp::data::{
    perplexity, pretrain_dense, synthetic_corpus, BatchSource, Corpus, Masked, PplReport, PretrainConfig, Split,
};
use disp::model::{DenseModel, MlpKind, ModelSpec};
use disp::prune::{equivalence_report, extract, finalize_gates};
use disp::reinmax::ReinMaxConfig;
use disp::report::ArchitectureReport;
use disp::search::{search, TrainConfig, Tying};
use disp::tensor::{Dtype, NormKind, Real};
use disp::verify::{self, Suite};
use disp::{DispError, Result};

#[derive(Parser, Debug)]
#[command(name = "disp", version, about = "Dimension-independent structural pruning for small transformers")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a dense byte-level model from scratch.
    Pretrain(PretrainArgs),
    /// Learn per-block widths under a parameter budget with the model frozen.
    Search(SearchArgs),
    /// Slice a dense checkpoint down to learned gates.
    Prune(PruneArgs),
    /// Perplexity of a dense, masked or pruned model.
    Eval(EvalArgs),
    /// Run invariant suites.
    Verify(VerifyArgs),
    /// Compare masked and pruned forwards of a checkpoint pair.
    VerifyEquivalence(VerifyEquivalenceArgs),
    /// Write width and dimension-usage CSVs for gates or a pruned model.
    Report(ReportArgs),
    /// Write a deterministic synthetic text corpus.
    SynthCorpus(SynthArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// key=value file whose keys mirror the long flags; flags win.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; manifests are appended to OUT/manifests.jsonl.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long, default_value = "f64", value_parser = ["f32", "f64"])]
    precision: String,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, required = true)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = Corpus::DEFAULT_VALID_FRACTION)]
    valid_fraction: f64,
    #[arg(long, default_value_t = 1500)]
    steps: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    d_mid: usize,
    #[arg(long, default_value_t = 64)]
    max_seq_len: usize,
    #[arg(long, default_value = "gated", value_parser = ["gated", "standard"])]
    mlp: String,
    #[arg(long, default_value = "layernorm", value_parser = ["layernorm", "rmsnorm"])]
    norm: String,
    #[arg(long)]
    tie_embeddings: bool,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[command(flatten)]
    common: Common,
    /// Dense checkpoint to prune.
    #[arg(long, required = true)]
    model: Option<PathBuf>,
    #[arg(long, required = true)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = Corpus::DEFAULT_VALID_FRACTION)]
    valid_fraction: f64,
    /// Fraction p of gate-controlled parameters to keep.
    #[arg(long, default_value_t = 0.5)]
    target_ratio: f64,
    #[arg(long, default_value_t = PruneBudget::DEFAULT_LAMBDA)]
    lambda: f64,
    /// disp, constrained, elementwise or no-gru.
    #[arg(long, default_value = "disp", value_parser = ["disp", "constrained", "elementwise", "no-gru"])]
    mode: String,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 3.0)]
    gate_bias: f64,
    #[arg(long, default_value_t = 10_000)]
    iterations: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.05)]
    weight_decay: f64,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    /// Adjust finalized gates to the budget by margin order.
    #[arg(long)]
    enforce_budget: bool,
}

#[derive(Args, Debug)]
struct PruneArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, required = true)]
    model: Option<PathBuf>,
    /// Trained gate parametrization from `disp search`.
    #[arg(long, conflicts_with = "gates", required_unless_present = "gates")]
    hypernet: Option<PathBuf>,
    /// Finalized gates from `disp search`.
    #[arg(long)]
    gates: Option<PathBuf>,
    #[arg(long)]
    enforce_budget: bool,
    /// Budget for --enforce-budget; defaults to the search target.
    #[arg(long)]
    target_ratio: Option<f64>,
    #[arg(long, default_value_t = 3)]
    equivalence_trials: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Dense or pruned checkpoint.
    #[arg(long, required = true)]
    model: Option<PathBuf>,
    /// Gates applied as masks to a dense model.
    #[arg(long)]
    gates: Option<PathBuf>,
    #[arg(long, required = true)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = Corpus::DEFAULT_VALID_FRACTION)]
    valid_fraction: f64,
    #[arg(long, default_value = "valid", value_parser = ["train", "valid"])]
    split: String,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long)]
    max_tokens: Option<usize>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "all", value_parser = ["gradcheck", "prop1", "reinmax", "equivalence", "all"])]
    suite: String,
}

#[derive(Args, Debug)]
struct VerifyEquivalenceArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, required = true)]
    model: Option<PathBuf>,
    #[arg(long, required = true)]
    pruned: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    trials: usize,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Gates or pruned checkpoint.
    #[arg(long, required = true)]
    input: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1_100_000)]
    bytes: usize,
    #[arg(long, required = true)]
    output: Option<PathBuf>,
}

/// Parses argv, runs the command and returns the process exit code.
pub fn main(argv: Vec<OsString>) -> i32 {
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let matches = match Cli::command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let (name, sub) = matches.subcommand().map(|(n, m)| (n.to_string(), m.clone())).unwrap_or_default();
    let arg_ids = Cli::command()
        .find_subcommand(&name)
        .map(|c| c.get_arguments().map(|a| a.get_id().to_string()).collect())
        .unwrap_or_default();
    let ctx = Ctx {
        argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        matches: sub,
        arg_ids,
    };
    match dispatch(cli.command, &ctx) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Splices `--key value` pairs from a `--config` file in front of the
/// explicit flags so that explicit flags override them.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let path = args.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            args.get(i + 1).cloned()
        } else {
            a.strip_prefix("--config=").map(str::to_string)
        }
    });
    let (Some(path), Some(sub)) = (path, args.get(1)) else {
        return Ok(argv);
    };
    let cmd = Cli::command();
    let Some(sub_cmd) = cmd.find_subcommand(sub) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| DispError::Usage(format!("cannot read config file {path}: {e}")))?;
    let mut injected = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| DispError::Usage(format!("{path}:{}: expected key=value", n + 1)))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key == "config" {
            return Err(DispError::Usage(format!("{path}:{}: config files cannot nest", n + 1)));
        }
        let arg = sub_cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| DispError::Usage(format!("{path}:{}: unknown key `{key}` for `{sub}`", n + 1)))?;
        if arg.get_action().takes_values() {
            injected.push(format!("--{key}"));
            injected.push(value.to_string());
        } else {
            match value {
                "true" => injected.push(format!("--{key}")),
                "false" => {}
                _ => return Err(DispError::Usage(format!("{path}:{}: `{key}` expects true or false", n + 1))),
            }
        }
    }
    let mut out: Vec<OsString> = argv[..2].to_vec();
    out.extend(injected.into_iter().map(OsString::from));
    out.extend(argv[2..].iter().cloned());
    Ok(out)
}

struct Ctx {
    argv: Vec<String>,
    matches: ArgMatches,
    arg_ids: Vec<String>,
}

impl Ctx {
    /// Every resolved argument of the subcommand, defaults included.
    fn resolved(&self) -> Map<String, Value> {
        let mut map = Map::new();
        for id in &self.arg_ids {
            let id = id.as_str();
            let Ok(Some(raw)) = self.matches.try_get_raw(id) else {
                continue;
            };
            let vals: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            let v = if vals.len() == 1 {
                Value::String(vals[0].clone())
            } else {
                json!(vals)
            };
            map.insert(id.to_string(), v);
        }
        map
    }
}

struct Manifest {
    command: &'static str,
    extra: Map<String, Value>,
    inputs: Vec<(&'static str, PathBuf)>,
    outputs: Vec<PathBuf>,
}

impl Manifest {
    fn new(command: &'static str) -> Self {
        Manifest {
            command,
            extra: Map::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn set(&mut self, key: &str, value: impl Into<Value>) {
        self.extra.insert(key.to_string(), value.into());
    }

    fn append(self, ctx: &Ctx, common: &Common) -> Result<()> {
        let inputs = self
            .inputs
            .iter()
            .map(|(name, p)| {
                Ok(json!({"role": name, "path": p.display().to_string(), "sha256": file_sha256(p)?}))
            })
            .collect::<Result<Vec<_>>>()?;
        let outputs = self
            .outputs
            .iter()
            .map(|p| Ok(json!({"path": p.display().to_string(), "sha256": file_sha256(p)?})))
            .collect::<Result<Vec<_>>>()?;
        let record = json!({
            "command": self.command,
            "artifact_version": env!("CARGO_PKG_VERSION"),
            "argv": ctx.argv,
            "config": ctx.resolved(),
            "seed": common.seed,
            "inputs": inputs,
            "outputs": outputs,
            "results": self.extra,
        });
        std::fs::create_dir_all(&common.out)?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(common.out.join("manifests.jsonl"))?;
        writeln!(f, "{record}")?;
        Ok(())
    }
}

fn required(p: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    p.clone().ok_or_else(|| DispError::Usage(format!("--{flag} is required")))
}

fn out_file(common: &Common, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&common.out)?;
    Ok(common.out.join(name))
}

fn dispatch(cmd: Command, ctx: &Ctx) -> Result<i32> {
    let precision = |c: &Common| Dtype::parse(&c.precision);
    match cmd {
        Command::Pretrain(a) => match precision(&a.common)? {
            Dtype::F32 => cmd_pretrain::<f32>(&a, ctx),
            Dtype::F64 => cmd_pretrain::<f64>(&a, ctx),
        },
        Command::Search(a) => match precision(&a.common)? {
            Dtype::F32 => cmd_search::<f32>(&a, ctx),
            Dtype::F64 => cmd_search::<f64>(&a, ctx),
        },
        Command::Prune(a) => match precision(&a.common)? {
            Dtype::F32 => cmd_prune::<f32>(&a, ctx),
            Dtype::F64 => cmd_prune::<f64>(&a, ctx),
        },
        Command::Eval(a) => match precision(&a.common)? {
            Dtype::F32 => cmd_eval::<f32>(&a, ctx),
            Dtype::F64 => cmd_eval::<f64>(&a, ctx),
        },
        Command::Verify(a) => cmd_verify(&a, ctx),
        Command::VerifyEquivalence(a) => match precision(&a.common)? {
            Dtype::F32 => cmd_verify_equivalence::<f32>(&a, ctx),
            Dtype::F64 => cmd_verify_equivalence::<f64>(&a, ctx),
        },
        Command::Report(a) => cmd_report(&a, ctx),
        Command::SynthCorpus(a) => cmd_synth(&a, ctx),
    }
}

fn cmd_pretrain<T: Real>(a: &PretrainArgs, ctx: &Ctx) -> Result<i32> {
    let corpus_path = required(&a.corpus, "corpus")?;
    let corpus = Corpus::load(&corpus_path, a.valid_fraction)?;
    let spec = ModelSpec {
        d: a.d,
        n_layers: a.layers,
        n_heads: a.heads,
        d_mid: a.d_mid,
        mlp_kind: MlpKind::parse(&a.mlp)?,
        norm_kind: NormKind::parse(&a.norm)?,
        vocab_size: disp::data::VOCAB_SIZE,
        max_seq_len: a.max_seq_len,
        tie_embeddings: a.tie_embeddings,
    };
    spec.validate()?;
    let cfg = PretrainConfig {
        steps: a.steps,
        lr: a.lr,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        seq_len: a.seq_len,
        seed: a.common.seed,
        clip: 1.0,
    };
    let eval_len = a.seq_len.min(spec.max_seq_len);
    let before = perplexity(&DenseModel::<T>::init(&spec, a.common.seed)?, corpus.valid(), eval_len, 8, Some(16_384))?;
    eprintln!("{spec}");
    eprintln!("untrained valid ppl {:.3}", before.ppl);
    let log_every = a.log_every;
    let model = pretrain_dense::<T>(&spec, corpus.train(), &cfg, |step, loss| {
        if log_every > 0 && (step % log_every == 0 || step + 1 == cfg.steps) {
            eprintln!("step {step:>6}  loss {loss:.4}");
        }
    })?;
    let after = perplexity(&model, corpus.valid(), eval_len, 8, None)?;
    println!("valid ppl {:.4} (untrained {:.2}) over {} tokens", after.ppl, before.ppl, after.tokens);
    let path = out_file(&a.common, "dense.ckpt")?;
    dense_to_checkpoint(&model).save(&path)?;
    println!("wrote {}", path.display());
    let mut m = Manifest::new("pretrain");
    m.inputs.push(("corpus", corpus_path));
    m.outputs.push(path);
    m.set("valid_ppl", after.ppl);
    m.set("untrained_valid_ppl", before.ppl);
    m.set("model_hash", model_hash(&model)?);
    m.append(ctx, &a.common)?;
    Ok(0)
}

fn cmd_search<T: Real>(a: &SearchArgs, ctx: &Ctx) -> Result<i32> {
    let model_path = required(&a.model, "model")?;
    let corpus_path = required(&a.corpus, "corpus")?;
    let file_hash_before = file_sha256(&model_path)?;
    let model: DenseModel<T> = dense_from_checkpoint(&Checkpoint::load(&model_path)?)?;
    let hash_before = model_hash(&model)?;
    let corpus = Corpus::load(&corpus_path, a.valid_fraction)?;
    let spec = model.spec.clone();
    let budget = PruneBudget::new(&spec, a.target_ratio, a.lambda)?;
    let mut cfg = TrainConfig {
        lr: a.lr,
        weight_decay: a.weight_decay,
        iterations: a.iterations,
        batch_size: a.batch_size,
        seq_len: a.seq_len.min(spec.max_seq_len),
        seed: a.common.seed,
        reinmax: ReinMaxConfig {
            tau: a.tau,
            c: a.gate_bias,
            seed: a.common.seed,
        },
        clip: a.clip,
        log_every: a.log_every,
        ..TrainConfig::default()
    };
    cfg.set_mode(&a.mode)?;
    let mut data = BatchSource::new(corpus.train(), cfg.seq_len, cfg.batch_size, cfg.seed)?;
    let outcome = search(&model, &mut data, &budget, &cfg, None, |r| {
        let opens: Vec<String> = r.open_fraction.iter().map(|f| format!("{f:.2}")).collect();
        eprintln!(
            "it {:>6}  lm {:.4}  R {:.4}  T/T_total {:.4}  open [{}]",
            r.iteration,
            r.lm,
            r.r_raw,
            r.ratio,
            opens.join(" ")
        );
    })?;
    let tied = cfg.tying == Tying::Constrained;
    let gates = finalize_gates(&spec, &outcome.net, &cfg.reinmax, tied, a.enforce_budget.then_some(&budget))?;

    let hash_after = model_hash(&model)?;
    let file_hash_after = file_sha256(&model_path)?;
    let frozen = hash_before == hash_after && file_hash_before == file_hash_after && outcome.model_grad_buffers == 0;

    let report = ArchitectureReport::new(&spec, &gates)?;
    let mut hn = hypernet_to_checkpoint(&outcome.net, &spec);
    hn.set("tying", if tied { "constrained" } else { "independent" });
    hn.set("search_mode", cfg.mode_name());
    hn.set("gate_bias", cfg.reinmax.c);
    hn.set("tau", cfg.reinmax.tau);
    hn.set("target_ratio", a.target_ratio);
    hn.set("lambda", a.lambda);
    let hn_path = out_file(&a.common, "hypernet.ckpt")?;
    hn.save(&hn_path)?;
    let gates_path = out_file(&a.common, "gates.ckpt")?;
    gates_to_checkpoint(&spec, &gates).save(&gates_path)?;
    let log_path = out_file(&a.common, "runlog.csv")?;
    std::fs::write(&log_path, outcome.log.to_csv())?;

    println!(
        "mode {}  finalized ratio {:.4} (target {})  T {} / {}",
        cfg.mode_name(),
        report.ratio(),
        a.target_ratio,
        report.t,
        report.t_total
    );
    for (l, w) in report.widths.iter().enumerate() {
        println!("block {l}: s1 {} s2 {} s3 {} s4 {} s5 {}", w[0], w[1], w[2], w[3], w[4]);
    }
    if let Some(it) = outcome.log.first_below(0.05) {
        println!("normalized R first below 0.05 at iteration {it}");
    }
    println!("model weights frozen: {}", if frozen { "yes" } else { "NO" });

    let mut m = Manifest::new("search");
    m.inputs.push(("model", model_path));
    m.inputs.push(("corpus", corpus_path));
    m.outputs.extend([hn_path, gates_path, log_path]);
    m.set("lambda", a.lambda);
    m.set("mode", cfg.mode_name());
    m.set("finalized_ratio", report.ratio());
    m.set("model_hash_before", hash_before);
    m.set("model_hash_after", hash_after);
    m.set("weights_frozen", frozen);
    m.set("first_below_0.05", outcome.log.first_below(0.05));
    m.append(ctx, &a.common)?;
    if !frozen {
        return Err(DispError::Contract("model weights changed during search".into()));
    }
    Ok(0)
}

fn cmd_prune<T: Real>(a: &PruneArgs, ctx: &Ctx) -> Result<i32> {
    let model_path = required(&a.model, "model")?;
    let model: DenseModel<T> = dense_from_checkpoint(&Checkpoint::load(&model_path)?)?;
    let mut m = Manifest::new("prune");
    m.inputs.push(("model", model_path));
    let gates = if let Some(hp) = &a.hypernet {
        let ck = Checkpoint::load(hp)?;
        let (spec, net) = hypernet_from_checkpoint::<T>(&ck)?;
        if spec != model.spec {
            return Err(DispError::Contract("hypernet checkpoint was trained for a different model spec".into()));
        }
        let cfg = ReinMaxConfig {
            tau: ck.parse("tau").unwrap_or(1.0),
            c: ck.parse("gate_bias").unwrap_or(3.0),
            seed: 0,
        };
        let tied = ck.get("tying").map(|t| t == "constrained").unwrap_or(false);
        let budget = if a.enforce_budget {
            let p = match a.target_ratio {
                Some(p) => p,
                None => ck.parse("target_ratio")?,
            };
            Some(PruneBudget::new(&spec, p, PruneBudget::DEFAULT_LAMBDA)?)
        } else {
            None
        };
        m.inputs.push(("hypernet", hp.clone()));
        finalize_gates(&spec, &net, &cfg, tied, budget.as_ref())?
    } else {
        let gp = required(&a.gates, "gates")?;
        if a.enforce_budget {
            return Err(DispError::Usage(
                "--enforce-budget needs --hypernet; finalized gates carry no margins".into(),
            ));
        }
        let (spec, gates) = gates_from_checkpoint(&Checkpoint::load(&gp)?)?;
        if spec != model.spec {
            return Err(DispError::Contract("gates were produced for a different model spec".into()));
        }
        m.inputs.push(("gates", gp));
        gates
    };
    let pruned = extract(&model, &gates)?;
    let report = ArchitectureReport::new(&model.spec, &gates)?;
    println!(
        "pruned params {} (dense {}), gate-controlled ratio {:.4}",
        pruned.param_count(),
        model.param_count(),
        report.ratio()
    );
    if a.equivalence_trials > 0 {
        let eq = equivalence_report(&model, &pruned, &gates, a.equivalence_trials, a.common.seed)?;
        println!("masked vs pruned max abs diff {:.3e} over {} trials", eq.max_abs_diff, eq.trials);
        m.set("equivalence_max_abs_diff", eq.max_abs_diff);
    }
    let path = out_file(&a.common, "pruned.ckpt")?;
    pruned_to_checkpoint(&pruned).save(&path)?;
    println!("wrote {}", path.display());
    m.outputs.push(path);
    m.set("pruned_params", pruned.param_count());
    m.set("dense_params", model.param_count());
    m.set("ratio", report.ratio());
    m.append(ctx, &a.common)?;
    Ok(0)
}

fn cmd_eval<T: Real>(a: &EvalArgs, ctx: &Ctx) -> Result<i32> {
    let model_path = required(&a.model, "model")?;
    let corpus_path = required(&a.corpus, "corpus")?;
    let corpus = Corpus::load(&corpus_path, a.valid_fraction)?;
    let split = Split::parse(&a.split)?;
    let tokens = corpus.split(split);
    let ck = Checkpoint::load(&model_path)?;
    let mut m = Manifest::new("eval");
    m.inputs.push(("model", model_path.clone()));
    m.inputs.push(("corpus", corpus_path));
    let (kind, report): (&str, PplReport) = match ck.kind.as_str() {
        "dense" => {
            let model: DenseModel<T> = dense_from_checkpoint(&ck)?;
            let seq = a.seq_len.min(model.spec.max_seq_len);
            match &a.gates {
                Some(gp) => {
                    let (spec, gates) = gates_from_checkpoint(&Checkpoint::load(gp)?)?;
                    if spec != model.spec {
                        return Err(DispError::Contract("gates were produced for a different model spec".into()));
                    }
                    m.inputs.push(("gates", gp.clone()));
                    let masked = Masked { model: &model, gates: &gates };
                    ("masked", perplexity(&masked, tokens, seq, a.batch_size, a.max_tokens)?)
                }
                None => ("dense", perplexity(&model, tokens, seq, a.batch_size, a.max_tokens)?),
            }
        }
        "pruned" => {
            if a.gates.is_some() {
                return Err(DispError::Usage("--gates applies to dense checkpoints only".into()));
            }
            let model = pruned_from_checkpoint::<T>(&ck)?;
            let seq = a.seq_len.min(model.spec.max_seq_len);
            ("pruned", perplexity(&model, tokens, seq, a.batch_size, a.max_tokens)?)
        }
        other => return Err(DispError::Usage(format!("cannot evaluate a `{other}` checkpoint"))),
    };
    println!("{} ppl {:.4} over {} tokens ({} split)", kind, report.ppl, report.tokens, split.as_str());
    let record = json!({
        "model": model_path.display().to_string(),
        "kind": kind,
        "split": split.as_str(),
        "ppl": report.ppl,
        "mean_nll": report.mean_nll,
        "tokens": report.tokens,
        "seq_len": report.seq_len,
        "windowing": "non-overlapping",
    });
    let path = out_file(&a.common, "eval.json")?;
    std::fs::write(&path, format!("{record:#}\n"))?;
    m.outputs.push(path);
    m.set("ppl", report.ppl);
    m.append(ctx, &a.common)?;
    Ok(0)
}

fn cmd_verify(a: &VerifyArgs, ctx: &Ctx) -> Result<i32> {
    let suite = Suite::parse(&a.suite)?;
    let reports = verify::run(suite, a.common.seed)?;
    let mut ok = true;
    let mut m = Manifest::new("verify");
    for r in &reports {
        println!("{r}");
        ok &= r.pass();
        m.set(r.suite.as_str(), r.pass());
    }
    m.append(ctx, &a.common)?;
    Ok(if ok { 0 } else { 1 })
}

fn cmd_verify_equivalence<T: Real>(a: &VerifyEquivalenceArgs, ctx: &Ctx) -> Result<i32> {
    let model_path = required(&a.model, "model")?;
    let pruned_path = required(&a.pruned, "pruned")?;
    let model: DenseModel<T> = dense_from_checkpoint(&Checkpoint::load(&model_path)?)?;
    let pruned = pruned_from_checkpoint::<T>(&Checkpoint::load(&pruned_path)?)?;
    if pruned.spec != model.spec {
        return Err(DispError::Contract("pruned checkpoint comes from a different model spec".into()));
    }
    let gates = pruned.gates();
    let r = equivalence_report(&model, &pruned, &gates, a.trials, a.common.seed)?;
    println!("trials {}  max abs logit diff {:.3e}  tolerance {:.0e}", r.trials, r.max_abs_diff, r.tolerance);
    for (l, d) in r.per_block_diffs.iter().enumerate() {
        println!("block {l}: max abs diff {d:.3e}");
    }
    let mut m = Manifest::new("verify-equivalence");
    m.inputs.push(("model", model_path));
    m.inputs.push(("pruned", pruned_path));
    m.set("max_abs_diff", r.max_abs_diff);
    m.set("pass", r.pass);
    m.append(ctx, &a.common)?;
    if r.pass {
        println!("PASS");
        Ok(0)
    } else {
        println!("FAIL (first offending block {:?})", r.offending_block);
        Ok(1)
    }
}

fn cmd_report(a: &ReportArgs, ctx: &Ctx) -> Result<i32> {
    let input = required(&a.input, "input")?;
    let (spec, gates) = gates_from_checkpoint(&Checkpoint::load(&input)?)?;
    let report = ArchitectureReport::new(&spec, &gates)?;
    let paths = report.write(&a.common.out)?;
    let mean = report.mean_preservation();
    println!(
        "ratio {:.4}  T {} / {}  mean dim preservation {:.4}",
        report.ratio(),
        report.t,
        report.t_total,
        mean
    );
    if (mean - report.ratio()).abs() > 0.15 {
        eprintln!(
            "warning: mean dimension preservation {mean:.3} is more than 0.15 away from the ratio {:.3}",
            report.ratio()
        );
    }
    for p in &paths {
        println!("wrote {}", p.display());
    }
    let mut m = Manifest::new("report");
    m.inputs.push(("input", input));
    m.outputs.extend(paths);
    m.set("ratio", report.ratio());
    m.append(ctx, &a.common)?;
    Ok(0)
}

fn cmd_synth(a: &SynthArgs, ctx: &Ctx) -> Result<i32> {
    let path = required(&a.output, "output")?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&path, synthetic_corpus(a.bytes, a.common.seed))?;
    println!("wrote {} bytes to {}", a.bytes, path.display());
    let mut m = Manifest::new("synth-corpus");
    m.outputs.push(path);
    m.append(ctx, &a.common)?;
    Ok(0)
}
