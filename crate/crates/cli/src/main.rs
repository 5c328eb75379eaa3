use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use star::autodiff::op_suite;
use star::eval::{EvalSession, Tap, DEFAULT_RIDGE};
use star::io::{build_report, config_text, load_checkpoint, parse_config, save_checkpoint, write_atomic, write_report};
use star::models::{Model, Variant};
use star::trainer::{
    metrics_csv, star_loss_grad_check, train_run_with, TrainConfig, STAR_CHECK_FLOOR, STAR_CHECK_STEP,
};
use star::Error;

/// Maximum relative error accepted by `star gradcheck`.
const GRADCHECK_TOL: f64 = 1e-3;

#[derive(Parser)]
#[command(name = "star", version, about = "Train and evaluate routed projection experts")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// key = value run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the configured out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Frozen {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to evaluate; defaults to <out>/model.ckpt.
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write metrics.csv, model.ckpt and train.json.
    Train(Common),
    /// Write embeddings of the training images as a binary dump.
    DumpEmbeddings {
        #[command(flatten)]
        frozen: Frozen,
        #[arg(long, default_value = "repr")]
        tap: Tap,
    },
    /// Linear probe accuracy on frozen embeddings.
    EvalLinear {
        #[command(flatten)]
        frozen: Frozen,
        #[arg(long, default_value = "repr")]
        tap: Tap,
    },
    /// k-nearest-neighbour accuracy against the training set.
    EvalKnn {
        #[command(flatten)]
        frozen: Frozen,
        #[arg(long, default_value = "repr")]
        tap: Tap,
        #[arg(long, default_value_t = 20)]
        k: usize,
    },
    /// Pairwise canonical correlation between expert outputs.
    EvalCca {
        #[command(flatten)]
        frozen: Frozen,
        #[arg(long, default_value_t = DEFAULT_RIDGE)]
        ridge: f64,
    },
    /// Mean routing weight per expert and task.
    EvalRouting(Frozen),
    /// R- and P-equivariance and invariance of an embedding.
    EvalEquivariance {
        #[command(flatten)]
        frozen: Frozen,
        #[arg(long, default_value = "zeq")]
        tap: Tap,
    },
    /// Cosine between the encoder gradients of the two losses.
    EvalGradalign(Frozen),
    /// Finite-difference checks of every operation and the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every applicable evaluation in one report.
    Report(Frozen),
}

/// Exit 1 for problems the user can fix, 2 for everything else.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::Contract(_)
        | Error::Range(_)
        | Error::Variant(_)
        | Error::Format(_)
        | Error::Io(_)
        | Error::InsufficientData(_)
        | Error::Diverged { .. } => 1,
        _ => 2,
    }
}

fn load_config(c: &Common) -> star::Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => parse_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    print!("{}", config_text(&cfg));
    Ok(cfg)
}

fn session(f: &Frozen) -> star::Result<EvalSession> {
    let cfg = load_config(&f.common)?;
    let path = f.ckpt.clone().unwrap_or_else(|| cfg.out_dir.join("model.ckpt"));
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    model.store.load(load_checkpoint(&path)?)?;
    EvalSession::new(&cfg, model)
}

fn emit(s: &EvalSession, command: &str, metrics: Value) -> star::Result<()> {
    std::fs::create_dir_all(&s.cfg.out_dir)?;
    let path = s.cfg.out_dir.join(format!("{command}.json"));
    write_report(&path, &build_report(command, &s.cfg, metrics))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn linear_json(s: &EvalSession, tap: Tap) -> star::Result<Value> {
    let p = s.linear(tap)?;
    let sweep: Vec<Value> = p
        .sweep
        .iter()
        .map(|&(reg, acc)| json!({"reg": reg, "val_acc": acc}))
        .collect();
    Ok(json!({
        "tap": tap.to_string(),
        "best_reg": p.best_reg,
        "val_acc": p.val_acc,
        "test_acc": p.test_acc,
        "unconverged": p.unconverged,
        "sweep": sweep,
    }))
}

fn cca_json(s: &EvalSession, ridge: f64) -> star::Result<Value> {
    let c = s.expert_cca(ridge)?;
    Ok(json!({
        "ridge": ridge,
        "experts": s.model.cfg.expert_labels(),
        "routed": s.model.has_routers(),
        "matrix": c.matrix,
        "grand_mean": c.grand_mean,
    }))
}

fn routing_json(s: &EvalSession) -> star::Result<Value> {
    let r = s.routing()?;
    let experts: Vec<Value> = r
        .experts
        .iter()
        .map(|e| json!({"expert": e.expert, "mean_inv": e.mean_inv, "mean_eq": e.mean_eq, "ratio": e.ratio}))
        .collect();
    Ok(json!({"experts": experts, "ratio_spread": r.ratio_spread()}))
}

fn equivariance_json(s: &EvalSession, tap: Tap) -> star::Result<Value> {
    let e = s.equivariance(tap)?;
    Ok(json!({"tap": tap.to_string(), "r_equivariance": e.r, "p_equivariance": e.p, "invariance": e.invariance}))
}

fn train(c: &Common) -> star::Result<()> {
    let cfg = load_config(c)?;
    let dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&dir)?;
    let run = train_run_with(&cfg, Some(&dir), |m| {
        eprintln!(
            "epoch {:>3}  lr {:.5}  inv {:.4}  eq {:.4}  total {:.4}",
            m.epoch, m.lr, m.loss_inv, m.loss_eq, m.loss_total
        )
    })?;
    write_atomic(&dir.join("metrics.csv"), metrics_csv(&run.metrics).as_bytes())?;
    save_checkpoint(&dir.join("model.ckpt"), &run.model.store)?;
    let last = run.metrics.last().expect("at least one epoch");
    let epochs: Vec<Value> = run
        .metrics
        .iter()
        .map(|m| {
            json!({
                "epoch": m.epoch, "lr": m.lr, "loss_inv": m.loss_inv, "loss_eq": m.loss_eq,
                "loss_total": m.loss_total, "expert_norms": m.expert_norms,
            })
        })
        .collect();
    let report = build_report(
        "train",
        &cfg,
        json!({"final_loss_total": last.loss_total, "epochs": epochs}),
    );
    write_report(&dir.join("train.json"), &report)?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn gradcheck(seed: u64, out: Option<&Path>) -> star::Result<bool> {
    let mut rows = Vec::new();
    for r in op_suite(seed)? {
        rows.push(("op", r.name, r.max_rel_error));
    }
    for v in [Variant::Mmoe, Variant::Separate, Variant::SingleShared] {
        let cfg = star::models::ModelConfig {
            variant: v,
            ..Default::default()
        };
        for r in star_loss_grad_check(&cfg, seed, 6, STAR_CHECK_STEP, STAR_CHECK_FLOOR)? {
            rows.push(("objective", format!("{v}/{}", r.name), r.max_rel_error));
        }
    }
    let worst = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    for (kind, name, err) in &rows {
        let mark = if *err < GRADCHECK_TOL { "ok" } else { "FAIL" };
        println!("{mark:<4} {kind:<9} {name:<40} {err:.3e}");
    }
    println!("worst relative error {worst:.3e} over {} checks", rows.len());
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let checks: Vec<Value> = rows
            .iter()
            .map(|(k, n, e)| json!({"kind": k, "name": n, "max_rel_error": e}))
            .collect();
        let cfg = TrainConfig {
            seed,
            ..Default::default()
        };
        let report = build_report(
            "gradcheck",
            &cfg,
            json!({"worst": worst, "tolerance": GRADCHECK_TOL, "checks": checks}),
        );
        write_report(&dir.join("gradcheck.json"), &report)?;
    }
    Ok(worst < GRADCHECK_TOL)
}

fn report(f: &Frozen) -> star::Result<()> {
    let s = session(f)?;
    let mut m = serde_json::Map::new();
    m.insert("linear_repr".into(), linear_json(&s, Tap::Repr)?);
    m.insert("knn_repr".into(), json!({"k": 20, "accuracy": s.knn(Tap::Repr, 20)?}));
    m.insert("equivariance_zinv".into(), equivariance_json(&s, Tap::ZInv)?);
    m.insert("equivariance_zeq".into(), equivariance_json(&s, Tap::ZEq)?);
    m.insert("cca".into(), cca_json(&s, DEFAULT_RIDGE)?);
    if s.model.has_routers() {
        m.insert("routing".into(), routing_json(&s)?);
    }
    m.insert("gradalign".into(), json!({"cosine": s.gradalign()?}));
    emit(&s, "report", Value::Object(m))
}

fn run(cmd: Cmd) -> star::Result<bool> {
    match cmd {
        Cmd::Train(c) => train(&c)?,
        Cmd::DumpEmbeddings { frozen, tap } => {
            let s = session(&frozen)?;
            let e = star::eval::dump_embeddings(&s.model, &s.train.images, tap)?;
            let bytes = star::io::encode_embeddings(e.rows, e.cols, &e.to_f32())?;
            std::fs::create_dir_all(&s.cfg.out_dir)?;
            let path = s
                .cfg
                .out_dir
                .join(format!("embeddings_{}.bin", tap.to_string().replace(':', "_")));
            write_atomic(&path, &bytes)?;
            println!("wrote {} ({} x {})", path.display(), e.rows, e.cols);
        }
        Cmd::EvalLinear { frozen, tap } => {
            let s = session(&frozen)?;
            let m = linear_json(&s, tap)?;
            println!("test accuracy {}", m["test_acc"]);
            emit(&s, "eval-linear", m)?;
        }
        Cmd::EvalKnn { frozen, tap, k } => {
            let s = session(&frozen)?;
            let acc = s.knn(tap, k)?;
            println!("test accuracy {acc}");
            emit(&s, "eval-knn", json!({"tap": tap.to_string(), "k": k, "accuracy": acc}))?;
        }
        Cmd::EvalCca { frozen, ridge } => {
            let s = session(&frozen)?;
            let m = cca_json(&s, ridge)?;
            println!("grand mean {}", m["grand_mean"]);
            emit(&s, "eval-cca", m)?;
        }
        Cmd::EvalRouting(frozen) => {
            let s = session(&frozen)?;
            let m = routing_json(&s)?;
            emit(&s, "eval-routing", m)?;
        }
        Cmd::EvalEquivariance { frozen, tap } => {
            let s = session(&frozen)?;
            let m = equivariance_json(&s, tap)?;
            emit(&s, "eval-equivariance", m)?;
        }
        Cmd::EvalGradalign(frozen) => {
            let s = session(&frozen)?;
            let c = s.gradalign()?;
            println!("cosine {c}");
            emit(
                &s,
                "eval-gradalign",
                json!({"batches": s.align_batches()?.len(), "cosine": c}),
            )?;
        }
        Cmd::Gradcheck { seed, out } => return gradcheck(seed, out.as_deref()),
        Cmd::Report(frozen) => report(&frozen)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
