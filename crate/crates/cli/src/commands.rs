use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use eecal_core::harness::run_trials_with_losses;
use eecal_core::output::{json_bytes, write_atomic};
use eecal_core::trace::ValidationReport;
use eecal_core::{
    calibrate, check_guarantees, derive_losses, efficiency_metrics, empirical_risk, generate, load_traces,
    save_traces, CalibrationParams, GuaranteeVerdict, Method, RiskKind, RiskSpec, RiskTarget, SynthConfig,
    ThresholdGrid, TraceFormat, TraceSet, TrialConfig, TrialReport,
};

use crate::config::{OutputFormat, RunArgs};

/// Writes to `--out` atomically, or to stdout.
fn emit(args: &RunArgs, bytes: &[u8]) -> Result<()> {
    match &args.out {
        Some(p) => write_atomic(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes).context("writing stdout")
        }
    }
}

/// The one-line summary goes to stdout unless stdout carries the output.
fn summary_line(args: &RunArgs, line: String) {
    if args.out.is_some() {
        println!("{line}");
    } else {
        eprintln!("{line}");
    }
}

fn trace_format(path: &Path, flag: Option<TraceFormat>) -> Result<TraceFormat> {
    flag.or_else(|| TraceFormat::from_path(path))
        .with_context(|| format!("cannot infer trace format of {}; pass --format", path.display()))
}

fn read_synth(path: &Path) -> Result<SynthConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing synthetic config {}", path.display()))
}

fn load_data(args: &RunArgs) -> Result<TraceSet> {
    match (&args.traces, &args.synth) {
        (Some(_), Some(_)) => bail!("pass only one of --traces and --synth"),
        (Some(p), None) => load_traces(p, trace_format(p, args.format)?)
            .with_context(|| format!("loading traces {}", p.display())),
        (None, Some(p)) => generate(&read_synth(p)?).context("generating synthetic traces"),
        (None, None) => bail!("one of --traces or --synth is required"),
    }
}

/// Without distributions, a prediction risk falls back to the only stored loss.
fn risk_spec(args: &RunArgs, ts: &TraceSet) -> Result<RiskSpec> {
    let mut spec = RiskSpec::new(
        args.risk.unwrap_or(RiskKind::Gap),
        args.target.unwrap_or(RiskTarget::Prediction),
    )
    .clipped(args.clip.unwrap_or(false))
    .with_seed(args.seed());
    let only_loss = match ts.loss_names() {
        [name] if !ts.has_distributions() => Some(name),
        _ => None,
    };
    if let Some(loss) = args.loss.as_ref().or(only_loss) {
        spec = spec.with_loss(loss.clone());
    }
    if let Some(b) = args.bound {
        spec = spec.with_bound(b);
    }
    spec.check().context("risk options")?;
    Ok(spec)
}

fn params(args: &RunArgs, method: Method, epsilon: f64) -> CalibrationParams {
    let delta = method.needs_delta().then(|| args.delta());
    let mut p = CalibrationParams::new(method, epsilon, delta);
    if let Some(mode) = args.nu_mode {
        p = p.with_nu_mode(mode);
    }
    p
}

fn grid(args: &RunArgs) -> Result<ThresholdGrid> {
    ThresholdGrid::new(args.grid_step()).context("grid options")
}

pub fn validate(args: &RunArgs) -> Result<()> {
    let ts = load_data(args)?;
    let report: ValidationReport = ts.diagnostics();
    emit(args, &json_bytes(&report)?)?;
    summary_line(
        args,
        format!(
            "valid: {} samples, {} exits, losses [{}]",
            ts.len(),
            ts.num_exits(),
            ts.loss_names().join(", ")
        ),
    );
    Ok(())
}

pub fn generate_cmd(args: &RunArgs) -> Result<()> {
    let synth = args.synth.as_ref().context("--synth is required")?;
    let out = args.out.as_ref().context("--out is required")?;
    let cfg = read_synth(synth)?;
    let ts = generate(&cfg).context("generating synthetic traces")?;
    save_traces(&ts, out, trace_format(out, args.format)?)
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "generated {} samples ({} exits, {} classes, monotone={}) -> {}",
        ts.len(),
        ts.num_exits(),
        cfg.num_classes,
        cfg.is_monotone(),
        out.display()
    );
    Ok(())
}

pub fn calibrate_cmd(args: &RunArgs) -> Result<()> {
    let ts = load_data(args)?;
    let spec = risk_spec(args, &ts)?;
    let lm = derive_losses(&ts, &spec).context("deriving losses")?;
    let method = args.method()?;
    let result =
        calibrate(&lm, &ts, &grid(args)?, &params(args, method, args.epsilon()?)).context("calibrating")?;
    let export = result.export();
    let bytes = match args.output_format.unwrap_or(OutputFormat::Json) {
        OutputFormat::Json => json_bytes(&export)?,
        OutputFormat::Csv => {
            let mut s = String::from("lambda,risk,bound_or_pvalue\n");
            for i in 0..export.lambda.len() {
                let b = export.bound_or_pvalue[i];
                s.push_str(&format!(
                    "{},{},{}\n",
                    export.lambda[i],
                    export.risk[i],
                    b.map(|x| x.to_string()).unwrap_or_default()
                ));
            }
            s.into_bytes()
        }
    };
    emit(args, &bytes)?;
    let risk = empirical_risk(&lm, &ts, result.lambda_hat)?;
    let eff = efficiency_metrics(&ts, result.lambda_hat, args.cost_weights.as_deref())?;
    summary_line(
        args,
        format!(
            "{method}: lambda_hat={} risk={risk:.4} gain={:.4} eps={}{}",
            result.lambda_hat,
            eff.relative_gain,
            result.epsilon,
            if result.empty_set {
                " (no threshold certified)"
            } else {
                ""
            }
        ),
    );
    Ok(())
}

#[derive(Serialize)]
struct Evaluation {
    lambda: f64,
    n: usize,
    risk: f64,
    mean_exit_layer: f64,
    relative_gain: f64,
    cost_weighted_gain: Option<f64>,
}

fn lambda_from(args: &RunArgs) -> Result<f64> {
    match (args.lambda, &args.calibration) {
        (Some(l), None) => Ok(l),
        (None, Some(p)) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let v: serde_json::Value =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            v.get("lambda_hat")
                .and_then(serde_json::Value::as_f64)
                .with_context(|| format!("{} has no numeric lambda_hat", p.display()))
        }
        (Some(_), Some(_)) => bail!("pass only one of --lambda and --calibration"),
        (None, None) => bail!("one of --lambda or --calibration is required"),
    }
}

pub fn evaluate(args: &RunArgs) -> Result<()> {
    let lambda = lambda_from(args)?;
    let ts = load_data(args)?;
    let lm = derive_losses(&ts, &risk_spec(args, &ts)?).context("deriving losses")?;
    let eff = efficiency_metrics(&ts, lambda, args.cost_weights.as_deref())?;
    let ev = Evaluation {
        lambda,
        n: ts.len(),
        risk: empirical_risk(&lm, &ts, lambda)?,
        mean_exit_layer: eff.mean_exit_layer,
        relative_gain: eff.relative_gain,
        cost_weighted_gain: eff.cost_weighted_gain,
    };
    let bytes = match args.output_format.unwrap_or(OutputFormat::Json) {
        OutputFormat::Json => json_bytes(&ev)?,
        OutputFormat::Csv => format!(
            "lambda,n,risk,mean_exit_layer,relative_gain\n{},{},{},{},{}\n",
            ev.lambda, ev.n, ev.risk, ev.mean_exit_layer, ev.relative_gain
        )
        .into_bytes(),
    };
    emit(args, &bytes)?;
    summary_line(
        args,
        format!(
            "lambda={lambda}: risk={:.4} mean_exit={:.3} gain={:.4}",
            ev.risk, ev.mean_exit_layer, ev.relative_gain
        ),
    );
    Ok(())
}

#[derive(Serialize)]
struct TrialSummary<'a> {
    #[serde(flatten)]
    report: &'a TrialReport,
    verdict: GuaranteeVerdict,
}

fn trial_config(args: &RunArgs, method: Method, epsilon: f64) -> Result<TrialConfig> {
    let mut cfg = TrialConfig::new(
        params(args, method, epsilon),
        args.trials(),
        args.cal_fraction(),
        args.seed(),
    )
    .with_grid(grid(args)?);
    cfg.cost_weights = args.cost_weights.clone();
    Ok(cfg)
}

pub fn trials(args: &RunArgs) -> Result<()> {
    let ts = load_data(args)?;
    let lm = derive_losses(&ts, &risk_spec(args, &ts)?).context("deriving losses")?;
    let method = args.method()?;
    let eps = args.epsilon()?;
    let mut report =
        run_trials_with_losses(&ts, &lm, &trial_config(args, method, eps)?).context("running trials")?;
    let verdict = check_guarantees(&report, eps, report.delta)?;
    let line = format!(
        "{method}: S={} mean lambda_hat={:.4} test risk={:.4} (se {:.4}) violations={:.3} gain={:.4} verdict={}",
        report.trials,
        report.mean_lambda_hat,
        report.mean_test_risk,
        report.se_test_risk,
        report.violation_rate,
        report.mean_gain,
        if verdict.pass() { "pass" } else { "fail" }
    );
    let bytes = match args.output_format.unwrap_or(OutputFormat::Csv) {
        OutputFormat::Csv => report.records_csv().into_bytes(),
        OutputFormat::Json => json_bytes(&TrialSummary {
            report: &report,
            verdict: verdict.clone(),
        })?,
    };
    emit(args, &bytes)?;
    if let Some(p) = &args.summary {
        report.records.clear();
        let summary = TrialSummary {
            report: &report,
            verdict,
        };
        write_atomic(p, &json_bytes(&summary)?).with_context(|| format!("writing {}", p.display()))?;
    }
    summary_line(args, line);
    Ok(())
}

pub fn curve(args: &RunArgs) -> Result<()> {
    let ts = load_data(args)?;
    let lm = derive_losses(&ts, &risk_spec(args, &ts)?).context("deriving losses")?;
    let method = args.method()?;
    let mut csv = String::from(
        "epsilon,method,lambda_hat,test_risk,test_risk_se,violation_rate,mean_exit,gain,gain_std,empty_rate,pass\n",
    );
    let mut passed = 0;
    let epsilons = args.epsilons()?;
    for &eps in epsilons {
        let report = run_trials_with_losses(&ts, &lm, &trial_config(args, method, eps)?)
            .with_context(|| format!("running trials at epsilon {eps}"))?;
        let verdict = check_guarantees(&report, eps, report.delta)?;
        passed += usize::from(verdict.pass());
        csv.push_str(&format!(
            "{eps},{method},{},{},{},{},{},{},{},{},{}\n",
            report.mean_lambda_hat,
            report.mean_test_risk,
            report.se_test_risk,
            report.violation_rate,
            report.mean_exit,
            report.mean_gain,
            report.std_gain,
            report.empty_rate,
            verdict.pass()
        ));
    }
    emit(args, csv.as_bytes())?;
    summary_line(
        args,
        format!(
            "{method}: {} epsilons x {} trials, guarantee verdict pass at {passed}/{}",
            epsilons.len(),
            args.trials(),
            epsilons.len()
        ),
    );
    Ok(())
}
