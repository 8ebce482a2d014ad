//! The `moelora` command line.
//!
//! ```text
//! moelora <train|gradcheck|verify-projection|compare|sweep> [--config FILE] [--<key> VALUE]... [--set KEY=VALUE]...
//! ```
//!
//! Every config key is also a flag (`--top_k 2` or `--top-k 2`). Flags
//! override the file. Exit status is 0 when every executed check passes and
//! every run finishes, 1 otherwise, and 2 on usage errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::Path;

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::bench::{self, compare_runs, fmt_f64, record_to_csv, run_many, write_text, RunOutput};
use crate::checkpoint;
use crate::config::{check_key, parse_pairs, TrainConfig, KEYS, OUTDIR_ENV};
use crate::error::{Error, Result};
use crate::grad::LossKind;
use crate::oracle::{self, CheckRow};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

fn config_args() -> Vec<Arg> {
    let mut args = vec![
        Arg::new("config")
            .long("config")
            .short('c')
            .value_name("FILE")
            .help("config file (key = value lines)"),
        Arg::new("set")
            .long("set")
            .value_name("KEY=VALUE")
            .action(ArgAction::Append)
            .help("override one config key"),
    ];
    for k in KEYS {
        let mut arg = Arg::new(k.name)
            .long(k.name)
            .value_name("VALUE")
            .help(k.help);
        let kebab = k.name.replace('_', "-");
        if kebab != k.name {
            arg = arg.alias(kebab);
        }
        args.push(arg);
    }
    args
}

pub fn command() -> Command {
    let sub = |name: &'static str, about: &'static str| {
        Command::new(name).about(about).args(config_args())
    };
    Command::new("moelora")
        .about("Mixture-of-LoRA-experts training with Riemannian preconditioning")
        .subcommand_required(true)
        .args_override_self(true)
        .arg_required_else_help(true)
        .subcommand(sub("train", "train one arm on one seed; writes <arm>_<seed>.csv and .ckpt"))
        .subcommand(
            sub("gradcheck", "compare analytic gradients with central differences").arg(
                Arg::new("samples")
                    .long("samples")
                    .value_name("COUNT")
                    .value_parser(clap::value_parser!(usize))
                    .default_value("200")
                    .help("coordinates per parameter class"),
            ),
        )
        .subcommand(sub(
            "verify-projection",
            "check the squared-gate and linear-gate projection identities and the balanced-gate ratio",
        ))
        .subcommand(
            sub("compare", "run the four ablation arms over all seeds and tabulate").arg(
                Arg::new("at-step")
                    .long("at-step")
                    .value_name("STEP")
                    .value_parser(clap::value_parser!(usize))
                    .help("comparison step (default: max_steps)"),
            ),
        )
        .subcommand(
            sub("sweep", "train over the cartesian product of swept keys").arg(
                Arg::new("sweep")
                    .long("sweep")
                    .value_name("KEY=V1,V2,...")
                    .action(ArgAction::Append)
                    .required(true)
                    .help("key and comma-separated values to sweep"),
            ),
        )
}

/// Config pairs from `--config`, `--set` and the per-key flags, in
/// increasing precedence, plus the `MOELORA_OUTDIR` fallback.
fn config_pairs(m: &ArgMatches) -> Result<Vec<(String, String)>> {
    let mut pairs = match m.get_one::<String>("config") {
        Some(path) => parse_pairs(
            &std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{path}: {e}")))?,
        )?,
        None => Vec::new(),
    };
    for s in m.get_many::<String>("set").into_iter().flatten() {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        check_key(k.trim())?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.name) {
            pairs.push((k.name.to_string(), v.clone()));
        }
    }
    if !pairs.iter().any(|(k, _)| k == "outdir") {
        if let Some(dir) = std::env::var_os(OUTDIR_ENV) {
            pairs.push(("outdir".into(), dir.to_string_lossy().into_owned()));
        }
    }
    Ok(pairs)
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let Some((name, sub)) = matches.subcommand() else {
        let _ = writeln!(err, "{}", command().render_usage());
        return EXIT_USAGE;
    };
    let result = config_pairs(sub).and_then(|pairs| {
        let cfg = TrainConfig::from_pairs(&pairs)?;
        std::fs::create_dir_all(&cfg.outdir)?;
        let echo = cfg.to_text();
        write_text(&cfg.outdir.join("config.txt"), &echo)?;
        out.write_all(echo.as_bytes())?;
        match name {
            "train" => cmd_train(&cfg, out, err),
            "gradcheck" => cmd_gradcheck(
                &cfg,
                *sub.get_one::<usize>("samples").expect("defaulted"),
                out,
            ),
            "verify-projection" => cmd_verify(&cfg, out),
            "compare" => cmd_compare(&cfg, sub.get_one::<usize>("at-step").copied(), out, err),
            "sweep" => {
                let specs: Vec<String> = sub
                    .get_many::<String>("sweep")
                    .into_iter()
                    .flatten()
                    .cloned()
                    .collect();
                cmd_sweep(&pairs, &specs, out, err)
            }
            _ => unreachable!("clap rejects unknown subcommands"),
        }
    });
    match result {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAIL,
        Err(e @ Error::Config(_)) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_FAIL
        }
    }
}

/// Entry point of the binary.
pub fn run() -> i32 {
    run_with(
        std::env::args_os(),
        &mut std::io::stdout(),
        &mut std::io::stderr(),
    )
}

fn report_abort(o: &RunOutput, err: &mut dyn Write) -> bool {
    match &o.record.aborted {
        Some(msg) => {
            let _ = writeln!(err, "aborted: {msg}");
            false
        }
        None => true,
    }
}

fn save_run(dir: &Path, stem: &str, o: &RunOutput) -> Result<()> {
    write_text(&dir.join(format!("{stem}.csv")), &record_to_csv(&o.record))?;
    checkpoint::save(&o.trained, &dir.join(format!("{stem}.ckpt")))
}

fn cmd_train(cfg: &TrainConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<bool> {
    let task = bench::Task::from_config(cfg, cfg.seed)?;
    let o = bench::train_loop(&task, cfg, cfg.seed)?;
    save_run(&cfg.outdir, &format!("{}_{}", o.record.arm, cfg.seed), &o)?;
    if let Some(last) = o.record.final_row() {
        writeln!(
            out,
            "{} seed {}: step {} train_loss {} eval_loss {}",
            o.record.arm,
            cfg.seed,
            last.step,
            fmt_f64(last.train_loss),
            fmt_f64(last.eval_loss)
        )?;
    }
    Ok(report_abort(&o, err))
}

fn emit_report(dir: &Path, stem: &str, rows: &[CheckRow], out: &mut dyn Write) -> Result<bool> {
    let text = oracle::format_report(rows);
    write_text(&dir.join(format!("{stem}.txt")), &text)?;
    oracle::write_report_csv(&dir.join(format!("{stem}.csv")), rows)?;
    out.write_all(text.as_bytes())?;
    Ok(rows.iter().all(|r| r.pass))
}

fn cmd_gradcheck(cfg: &TrainConfig, samples: usize, out: &mut dyn Write) -> Result<bool> {
    let losses = [
        LossKind::MseToken,
        LossKind::SoftmaxXent,
        LossKind::MseMatrix,
    ];
    let (rows, _) = oracle::gradcheck_rows(&losses, samples, cfg.seed)?;
    emit_report(&cfg.outdir, "gradcheck", &rows, out)
}

fn cmd_verify(cfg: &TrainConfig, out: &mut dyn Write) -> Result<bool> {
    let rows = oracle::verify_projection_suite(cfg.seed)?;
    emit_report(&cfg.outdir, "verify_projection", &rows, out)
}

fn cmd_compare(
    cfg: &TrainConfig,
    at_step: Option<usize>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<bool> {
    let jobs: Vec<(TrainConfig, u64)> = cfg
        .four_arms()
        .into_iter()
        .flat_map(|arm| cfg.seed_list().into_iter().map(move |s| (arm.clone(), s)))
        .collect();
    let outputs = run_many(&jobs)?;
    let mut ok = true;
    for o in &outputs {
        save_run(
            &cfg.outdir,
            &format!("{}_{}", o.record.arm, o.record.seed),
            o,
        )?;
        ok &= report_abort(o, err);
    }
    if !ok {
        return Ok(false);
    }
    let records: Vec<_> = outputs.into_iter().map(|o| o.record).collect();
    let table = compare_runs(&records, at_step.unwrap_or(cfg.max_steps))?;
    write_text(&cfg.outdir.join("compare.csv"), &table.to_csv())?;
    write_text(
        &cfg.outdir.join("compare_summary.csv"),
        &table.summary_csv(),
    )?;
    out.write_all(table.to_text().as_bytes())?;
    Ok(true)
}

/// Parses `key=v1,v2,...`.
pub fn parse_sweep_spec(spec: &str) -> Result<(String, Vec<String>)> {
    let (k, vs) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--sweep expects KEY=V1,V2,..., got {spec:?}")))?;
    let k = k.trim();
    check_key(k)?;
    if k == "outdir" {
        return Err(Error::Config("outdir cannot be swept".into()));
    }
    let values: Vec<String> = vs
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(Error::Config(format!("--sweep {k}: no values")));
    }
    Ok((k.to_string(), values))
}

/// Cartesian product of sweep specs, first key varying slowest.
pub fn sweep_cells(specs: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut cells = vec![Vec::new()];
    for (k, values) in specs {
        cells = cells
            .into_iter()
            .flat_map(|cell: Vec<(String, String)>| {
                values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push((k.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    cells
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '+') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// `<arm>_<key1>-<val1>_<key2>-<val2>...`.
pub fn cell_stem(arm: &str, cell: &[(String, String)]) -> String {
    let mut s = arm.to_string();
    for (k, v) in cell {
        s.push('_');
        s.push_str(&file_safe(k));
        s.push('-');
        s.push_str(&file_safe(v));
    }
    s
}

fn cmd_sweep(
    base: &[(String, String)],
    specs: &[String],
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<bool> {
    let specs = specs
        .iter()
        .map(|s| parse_sweep_spec(s))
        .collect::<Result<Vec<_>>>()?;
    let cells = sweep_cells(&specs);
    let mut jobs = Vec::new();
    let mut stems = Vec::new();
    for cell in &cells {
        let mut pairs = base.to_vec();
        pairs.extend(cell.iter().cloned());
        let cfg = TrainConfig::from_pairs(&pairs)?;
        let stem = cell_stem(&cfg.arm_name(), cell);
        for seed in cfg.seed_list() {
            jobs.push((cfg.clone(), seed));
            stems.push((stem.clone(), cell.clone()));
        }
    }
    let outdir = TrainConfig::from_pairs(base)?.outdir;
    let outputs = run_many(&jobs)?;
    let mut summary = String::from("cell,arm");
    for (k, _) in &specs {
        summary.push(',');
        summary.push_str(k);
    }
    summary.push_str(",seed,steps,final_train_loss,final_eval_loss\n");
    let mut ok = true;
    for ((stem, cell), o) in stems.iter().zip(&outputs) {
        save_run(&outdir, &format!("{stem}_{}", o.record.seed), o)?;
        ok &= report_abort(o, err);
        let last = o.record.final_row();
        summary.push_str(&format!("{stem},{}", o.record.arm));
        for (_, v) in cell {
            summary.push(',');
            summary.push_str(v);
        }
        summary.push_str(&format!(
            ",{},{},{},{}\n",
            o.record.seed,
            o.record.rows.len(),
            fmt_f64(last.map_or(f64::NAN, |r| r.train_loss)),
            fmt_f64(last.map_or(f64::NAN, |r| r.eval_loss)),
        ));
    }
    write_text(&outdir.join("sweep_summary.csv"), &summary)?;
    writeln!(
        out,
        "{} cells, {} runs; summary in {}",
        cells.len(),
        outputs.len(),
        outdir.join("sweep_summary.csv").display()
    )?;
    Ok(ok)
}
