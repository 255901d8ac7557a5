use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use crtb::crtb::{cell_weight_report, CrtbConfig};
use crtb::estimator::{fit_method, Method, ModelArtifact};
use crtb::modelselect::{kfold_cv, CvGrid};
use crtb::numkernel::{LocationKind, RobustScaleKind};
use crtb::preprocess::{fit_scaler, prefilter, transform};
use crtb::robustweights::PsiSpec;
use crtb::simlab::{self, detection_metrics, Detection, Scenario};
use ndarray::{Array2, Axis};

use crate::outputs::Outputs;
use crate::table::{read_mask, read_table, write_table, Table};
use crate::{CvArgs, FitArgs, FlagArgs, ModelArgs, PredictArgs, SimulateArgs};

fn read_pair(x: &Path, y: &Path) -> Result<(Table, Table)> {
    let x = read_table(x)?;
    let y = read_table(y)?;
    if x.nrows() != y.nrows() {
        bail!("row count mismatch: X has {} rows, Y has {} rows", x.nrows(), y.nrows());
    }
    Ok((x, y))
}

fn default_k(given: Option<usize>, cols: usize, n: usize) -> usize {
    given.unwrap_or_else(|| 3.min(cols).min(n.saturating_sub(1)).max(1))
}

fn build_config(m: &ModelArgs, n: usize, p: usize, q: usize) -> Result<(Method, CrtbConfig)> {
    let method = Method::from(m.method);
    let (loc, scale) = if method.is_robust() {
        (LocationKind::Median, RobustScaleKind::Mad)
    } else {
        (LocationKind::Mean, RobustScaleKind::Std)
    };
    let probs: [f64; 3] = m
        .alphas
        .as_slice()
        .try_into()
        .context("--alphas takes exactly three values")?;
    let cfg = CrtbConfig {
        k_x: default_k(m.kx, p, n),
        k_y: default_k(m.ky, q, n),
        eta_x: m.eta_x,
        eta_y: m.eta_y,
        location: m.centering.map_or(loc, Into::into),
        scale: m.scaling.map_or(scale, Into::into),
        alpha_cell: m.alpha_cell,
        psi: PsiSpec::new(m.psi.into(), probs)?,
        tol: m.tol,
        max_iter: m.max_iter,
        ..CrtbConfig::default()
    };
    cfg.validate()?;
    if !method.is_sparse() && (cfg.eta_x != 0.0 || cfg.eta_y != 0.0) {
        log::warn!("method {method} is dense; eta values are ignored");
    }
    Ok((method, cfg))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

fn detection_line(block: &str, d: &Detection) -> String {
    format!(
        "detection_{block}: precision={} recall={} f1={}\n",
        fmt_opt(d.precision),
        fmt_opt(d.recall),
        fmt_opt(d.f1)
    )
}

fn rate(flags: &Array2<u8>) -> f64 {
    flags.iter().map(|&v| f64::from(v)).sum::<f64>() / flags.len() as f64
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let (x, y) = read_pair(&a.x, &a.y)?;
    let (n, p, q) = (x.nrows(), x.data.ncols(), y.data.ncols());
    let (method, cfg) = build_config(&a.model, n, p, q)?;
    let wants_flags = a.flags || a.truth_x.is_some() || a.truth_y.is_some();
    if wants_flags && !method.is_robust() {
        bail!("cell flags and detection metrics need a robust method (crtb or crtb-sparse)");
    }
    let truth_x = a.truth_x.as_deref().map(|t| read_mask(t, n, p)).transpose()?;
    let truth_y = a.truth_y.as_deref().map(|t| read_mask(t, n, q)).transpose()?;

    let model = fit_method(method, x.data.view(), y.data.view(), &cfg)?;
    let mut out = Outputs::new(&a.out_dir)?;

    let mut report = String::new();
    writeln!(report, "method: {method}")?;
    writeln!(report, "n: {n}\np: {p}\nq: {q}")?;
    writeln!(report, "k_x: {}\nk_y: {}", cfg.k_x, cfg.k_y)?;
    let tb = model.twoblock();
    writeln!(report, "eta_x: {}\neta_y: {}", tb.eta_x, tb.eta_y)?;
    writeln!(report, "n_iter: {}\nconverged: {}", model.n_iter(), model.converged())?;
    let selected: Vec<&str> = tb.selected_x_variables().iter().map(|&j| x.names[j].as_str()).collect();
    writeln!(report, "selected_x: {}", selected.join(" "))?;
    if let Some(fit) = model.as_crtb() {
        let cw = cell_weight_report(fit);
        writeln!(report, "prefilter_flag_rate_x: {}", fit.floor_x.flag_rate())?;
        writeln!(report, "prefilter_flag_rate_y: {}", fit.floor_y.flag_rate())?;
        writeln!(report, "cell_flag_rate_x: {}", rate(&cw.x_flags))?;
        writeln!(report, "cell_flag_rate_y: {}", rate(&cw.y_flags))?;
        let low = |w: &ndarray::Array1<f64>| w.iter().filter(|&&v| v < 0.5).count();
        writeln!(report, "rows_downweighted_x: {}", low(&fit.wx.values))?;
        writeln!(report, "rows_downweighted_y: {}", low(&fit.wy.values))?;
        if let Some(t) = &truth_x {
            report.push_str(&detection_line("x", &detection_metrics(cw.x_flags.view(), t.view())?));
        }
        if let Some(t) = &truth_y {
            report.push_str(&detection_line("y", &detection_metrics(cw.y_flags.view(), t.view())?));
        }
        if a.flags {
            write_table(&out.path("cell_flags_x.csv"), &x.names, &cw.x_flags)?;
            write_table(&out.path("cell_flags_y.csv"), &y.names, &cw.y_flags)?;
            write_table(&out.path("cell_weights_x.csv"), &x.names, &cw.x_weights)?;
            write_table(&out.path("cell_weights_y.csv"), &y.names, &cw.y_weights)?;
        }
    }

    let mut coef = Array2::zeros((p + 1, q));
    coef.row_mut(0).assign(model.intercept());
    coef.slice_mut(ndarray::s![1.., ..]).assign(model.coefficients());
    write_coefficients(&out.path("coefficients.csv"), &x.names, &y.names, &coef)?;

    let artifact = ModelArtifact::new(method, model).with_names(x.names, y.names);
    out.write("model.json", &artifact.to_json()?)?;
    out.write("report.txt", &report)?;
    out.commit();
    print!("{report}");
    Ok(())
}

fn write_coefficients(path: &Path, x_names: &[String], y_names: &[String], coef: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["term".to_string()];
    header.extend(y_names.iter().cloned());
    w.write_record(&header)?;
    let terms = std::iter::once("intercept").chain(x_names.iter().map(String::as_str));
    for (term, row) in terms.zip(coef.axis_iter(Axis(0))) {
        let mut rec = vec![term.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let json = fs::read_to_string(&a.model).with_context(|| format!("cannot read {}", a.model.display()))?;
    let artifact = ModelArtifact::from_json(&json)?;
    let x = read_table(&a.x)?;
    let p = artifact.model.coefficients().nrows();
    if x.data.ncols() != p {
        bail!("schema mismatch: model expects {p} predictor columns, file has {}", x.data.ncols());
    }
    if !artifact.x_names.is_empty() && artifact.x_names != x.names {
        bail!(
            "schema mismatch: model columns [{}] differ from file columns [{}]",
            artifact.x_names.join(","),
            x.names.join(",")
        );
    }
    let yhat = artifact.model.predict(x.data.view())?;
    let names = if artifact.y_names.is_empty() {
        (1..=yhat.ncols()).map(|j| format!("y{j}")).collect()
    } else {
        artifact.y_names.clone()
    };
    let mut out = Outputs::new(&a.out_dir)?;
    let path = out.path("predictions.csv");
    write_table(&path, &names, &yhat)?;
    out.commit();
    println!("wrote {} predictions to {}", yhat.nrows(), path.display());
    Ok(())
}

fn flag_block(t: &Table, a: &FlagArgs) -> Result<Array2<u8>> {
    let scaler = fit_scaler(t.data.view(), a.centering.into(), a.scaling.into())?;
    let zs = transform(t.data.view(), &scaler)?;
    Ok(prefilter(zs.view(), a.alpha_cell)?.flags())
}

pub fn flag(a: &FlagArgs) -> Result<()> {
    let x = read_table(&a.x)?;
    let y = a.y.as_deref().map(read_table).transpose()?;
    if let Some(y) = &y {
        if y.nrows() != x.nrows() {
            bail!("row count mismatch: X has {} rows, Y has {} rows", x.nrows(), y.nrows());
        }
    }
    if a.truth_y.is_some() && y.is_none() {
        bail!("--truth-y needs --y");
    }
    let fx = flag_block(&x, a)?;
    let fy = y.as_ref().map(|y| flag_block(y, a)).transpose()?;

    let mut summary = format!("flag_rate_x: {}\n", rate(&fx));
    if let Some(t) = &a.truth_x {
        let t = read_mask(t, fx.nrows(), fx.ncols())?;
        summary.push_str(&detection_line("x", &detection_metrics(fx.view(), t.view())?));
    }
    if let Some(fy) = &fy {
        writeln!(summary, "flag_rate_y: {}", rate(fy))?;
        if let Some(t) = &a.truth_y {
            let t = read_mask(t, fy.nrows(), fy.ncols())?;
            summary.push_str(&detection_line("y", &detection_metrics(fy.view(), t.view())?));
        }
    }

    let mut out = Outputs::new(&a.out_dir)?;
    write_table(&out.path("flags_x.csv"), &x.names, &fx)?;
    if let (Some(y), Some(fy)) = (&y, &fy) {
        write_table(&out.path("flags_y.csv"), &y.names, fy)?;
    }
    out.commit();
    print!("{summary}");
    Ok(())
}

fn parse_components(specs: &[String]) -> Result<Vec<(usize, usize)>> {
    specs
        .iter()
        .map(|s| {
            let (a, b) = s
                .split_once(':')
                .with_context(|| format!("component pair '{s}' is not of the form kx:ky"))?;
            Ok((a.trim().parse()?, b.trim().parse()?))
        })
        .collect()
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .context("cannot start worker threads")
}

pub fn cv(a: &CvArgs) -> Result<()> {
    let (x, y) = read_pair(&a.x, &a.y)?;
    let (method, template) = build_config(&a.model, x.nrows(), x.data.ncols(), y.data.ncols())?;
    let grid = CvGrid {
        etas: a.etas.clone(),
        components: parse_components(&a.components)?,
        folds: a.folds,
        seed: a.seed,
    };
    let result = thread_pool(a.workers.max(1))?
        .install(|| kfold_cv(x.data.view(), y.data.view(), &grid, method, &template))?;

    let best = &result.table[result.best_index];
    let mut out = Outputs::new(&a.out_dir)?;
    out.write("cv_table.csv", &result.to_csv())?;
    out.write("best_config.json", &serde_json::to_string_pretty(&result.best)?)?;
    out.commit();
    println!(
        "best: eta_x={} eta_y={} k_x={} k_y={} mean={} sd={}",
        best.eta_x, best.eta_y, best.k_x, best.k_y, best.mean, best.sd
    );
    Ok(())
}

fn load_scenario(spec: &str) -> Result<Scenario> {
    if let Some(s) = simlab::preset(spec) {
        return Ok(s);
    }
    let path = Path::new(spec);
    if !path.is_file() {
        bail!(
            "unknown preset '{spec}' (and no such scenario file); presets: {}",
            simlab::PRESET_NAMES.join(", ")
        );
    }
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {spec}"))?;
    serde_json::from_str(&text).with_context(|| format!("{spec}: invalid scenario file"))
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let mut scenario = load_scenario(&a.scenario)?;
    if let Some(r) = a.replicates {
        scenario.replicates = r;
    }
    if let Some(s) = a.seed {
        scenario.seed = s;
    }
    if scenario.replicates == 0 {
        bail!("need at least one replicate");
    }
    scenario.validate()?;
    let workers = a.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let results = thread_pool(workers.max(1))?.install(|| scenario.run())?;

    let mut out = Outputs::new(&a.out_dir)?;
    out.write("records.csv", &simlab::records_csv(&results))?;
    let summary = simlab::summary_csv(&results, &scenario.methods);
    out.write("summary.csv", &summary)?;
    out.write("scenario.json", &serde_json::to_string_pretty(&scenario)?)?;
    out.commit();
    print!("{summary}");
    Ok(())
}
