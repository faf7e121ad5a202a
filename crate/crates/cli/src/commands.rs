//! The four pipeline commands. Every stage writes its artifacts under the
//! output directory:
//!
//! ```text
//! out/
//!   certify/   validation_report.json, reach.json, obs.json
//!   gramians/  gramians.json
//!   balance/   balanced_system.json, reduced_r<r>.json
//!   validate/  bound_reports.json
//!   simulate/  summary.json [, trajectories.nlbt]
//!   plots/     hsv.csv, validate.csv, output_mean_sq.csv, state_second_moment.csv
//!   run_metadata.json   (timestamps live here, nowhere else)
//! ```

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use nlbt_core::analysis::{validate_reduction, BoundPolicy};
use nlbt_core::balancing::{balance, select_order, truncate};
use nlbt_core::gramian::compute_gramians;
use nlbt_core::schema::{BalancedJson, GramiansJson, ReducedJson, SystemSchema};
use nlbt_core::sim::{simulate, simulate_raw};
use nlbt_core::system::validate_system;
use nlbt_core::{Error as CoreError, OrderPolicy, SamplingPlan};

use crate::config::{exit_code_for, OrdersSpec, ResolvedConfig};

pub struct CmdOutcome {
    pub exit: i32,
    pub messages: Vec<String>,
}

fn ensure_dir(path: &Path) -> Result<(), String> {
    fs::create_dir_all(path).map_err(|e| format!("creating {}: {e}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), String> {
    let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    fs::write(path, text + "\n").map_err(|e| format!("writing {}: {e}", path.display()))
}

fn write_csv(path: &Path, header: &str, rows: &[Vec<f64>]) -> Result<(), String> {
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| format!("writing {}: {e}", path.display()))
}

fn write_metadata(dir: &Path, command: &str, started: Instant) -> Result<(), String> {
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = serde_json::json!({
        "command": command,
        "unix_time": stamp,
        "elapsed_seconds": started.elapsed().as_secs_f64(),
    });
    write_json(&dir.join("run_metadata.json"), &meta)
}

fn plan_for(rc: &ResolvedConfig) -> SamplingPlan {
    SamplingPlan::new(rc.certify_pairs, rc.certify_seed)
}

/// Resolve the order list for `reduce`/`validate`.
fn resolve_orders(rc: &ResolvedConfig, sigma: &nalgebra::DVector<f64>) -> Result<Vec<usize>, CoreError> {
    match &rc.orders {
        OrdersSpec::List { values } => {
            for &r in values {
                if r == 0 || r > sigma.len() {
                    return Err(CoreError::OrderOutOfRange {
                        r,
                        n: sigma.len(),
                    });
                }
            }
            Ok(values.clone())
        }
        OrdersSpec::Tolerance { tau } => {
            Ok(vec![select_order(sigma, &OrderPolicy::Tolerance { tau: *tau })?])
        }
        OrdersSpec::Fixed { r } => Ok(vec![select_order(sigma, &OrderPolicy::Fixed { r: *r })?]),
        OrdersSpec::EnergyFraction { fraction } => Ok(vec![select_order(
            sigma,
            &OrderPolicy::EnergyFraction {
                fraction: *fraction,
            },
        )?]),
    }
}

pub fn cmd_certify(rc: &ResolvedConfig) -> Result<CmdOutcome, String> {
    let started = Instant::now();
    let dir = rc.output_dir.clone();
    let certify_dir = dir.join("certify");
    let gramian_dir = dir.join("gramians");
    ensure_dir(&certify_dir)?;
    ensure_dir(&gramian_dir)?;

    let report = validate_system(&rc.system);
    write_json(&certify_dir.join("validation_report.json"), &report)?;
    let mut messages = vec![format!(
        "structural checks: {}",
        if report.all_passed { "pass" } else { "FAIL" }
    )];
    if !report.point_symmetry.holds() {
        messages.push(format!(
            "point symmetry missing ({:?}); bound commands will refuse this system",
            report.point_symmetry
        ));
    }
    if !report.all_passed {
        write_metadata(&dir, "certify", started)?;
        return Ok(CmdOutcome { exit: 2, messages });
    }

    let plan = plan_for(rc);
    let gp = match compute_gramians(&rc.system, &rc.certificate, &plan) {
        Ok(gp) => gp,
        Err(e) => {
            messages.push(format!("gramian construction failed: {e}"));
            write_metadata(&dir, "certify", started)?;
            return Ok(CmdOutcome {
                exit: exit_code_for(&e),
                messages,
            });
        }
    };
    write_json(&certify_dir.join("reach.json"), &gp.reach_report)?;
    write_json(&certify_dir.join("obs.json"), &gp.obs_report)?;
    write_json(&gramian_dir.join("gramians.json"), &GramiansJson::from_pair(&gp))?;
    messages.push(format!(
        "reach residual {:.3e} ({}), obs residual {:.3e} ({})",
        gp.reach_report.max_residual,
        gp.reach_report.method,
        gp.obs_report.max_residual,
        gp.obs_report.method
    ));
    write_metadata(&dir, "certify", started)?;
    Ok(CmdOutcome { exit: 0, messages })
}

pub fn cmd_reduce(rc: &ResolvedConfig) -> Result<CmdOutcome, String> {
    let started = Instant::now();
    let dir = rc.output_dir.clone();
    let balance_dir = dir.join("balance");
    let gramian_dir = dir.join("gramians");
    let plots_dir = dir.join("plots");
    ensure_dir(&balance_dir)?;
    ensure_dir(&gramian_dir)?;
    ensure_dir(&plots_dir)?;

    let plan = plan_for(rc);
    let mut messages = Vec::new();
    let result: Result<_, CoreError> = (|| {
        let gp = compute_gramians(&rc.system, &rc.certificate, &plan)?;
        let bal = balance(&rc.system, &gp)?;
        Ok((gp, bal))
    })();
    let (gp, bal) = match result {
        Ok(v) => v,
        Err(e) => {
            messages.push(format!("reduction failed: {e}"));
            return Ok(CmdOutcome {
                exit: exit_code_for(&e),
                messages,
            });
        }
    };

    write_json(&gramian_dir.join("gramians.json"), &GramiansJson::from_pair(&gp))?;
    write_json(
        &balance_dir.join("balanced_system.json"),
        &BalancedJson::from_balanced(&bal).map_err(|e| e.to_string())?,
    )?;
    let hsv_rows: Vec<Vec<f64>> = bal
        .sigma
        .iter()
        .enumerate()
        .map(|(k, s)| vec![(k + 1) as f64, *s])
        .collect();
    write_csv(&plots_dir.join("hsv.csv"), "k,sigma_k", &hsv_rows)?;

    let orders = resolve_orders(rc, &bal.sigma).map_err(|e| e.to_string())?;
    for &r in &orders {
        let red = truncate(&bal, r).map_err(|e| e.to_string())?;
        write_json(
            &balance_dir.join(format!("reduced_r{r}.json")),
            &ReducedJson::from_reduced(&red).map_err(|e| e.to_string())?,
        )?;
    }
    messages.push(format!(
        "HSVs: [{}]",
        bal.sigma
            .iter()
            .map(|s| format!("{s:.6e}"))
            .collect::<Vec<_>>()
            .join(", ")
    ));
    messages.push(format!("reduced orders written: {orders:?}"));
    write_metadata(&dir, "reduce", started)?;
    Ok(CmdOutcome { exit: 0, messages })
}

pub fn cmd_validate(rc: &ResolvedConfig) -> Result<CmdOutcome, String> {
    let started = Instant::now();
    let dir = rc.output_dir.clone();
    let validate_dir = dir.join("validate");
    let gramian_dir = dir.join("gramians");
    let plots_dir = dir.join("plots");
    ensure_dir(&validate_dir)?;
    ensure_dir(&gramian_dir)?;
    ensure_dir(&plots_dir)?;

    let plan = plan_for(rc);
    let mut messages = Vec::new();
    if rc.x0.iter().any(|v| *v != 0.0) {
        messages.push("warning: configured x0 ignored; the error bound assumes x0 = 0".into());
    }

    let gp = match compute_gramians(&rc.system, &rc.certificate, &plan) {
        Ok(gp) => gp,
        Err(e) => {
            messages.push(format!("gramian construction failed: {e}"));
            return Ok(CmdOutcome {
                exit: exit_code_for(&e),
                messages,
            });
        }
    };
    write_json(&gramian_dir.join("gramians.json"), &GramiansJson::from_pair(&gp))?;

    let bal_probe = match balance(&rc.system, &gp) {
        Ok(b) => b,
        Err(e) => {
            messages.push(format!("balancing failed: {e}"));
            return Ok(CmdOutcome {
                exit: exit_code_for(&e),
                messages,
            });
        }
    };
    let hsv_rows: Vec<Vec<f64>> = bal_probe
        .sigma
        .iter()
        .enumerate()
        .map(|(k, s)| vec![(k + 1) as f64, *s])
        .collect();
    write_csv(&plots_dir.join("hsv.csv"), "k,sigma_k", &hsv_rows)?;

    let orders = match resolve_orders(rc, &bal_probe.sigma) {
        Ok(o) => o,
        Err(e) => {
            messages.push(e.to_string());
            return Ok(CmdOutcome {
                exit: exit_code_for(&e),
                messages,
            });
        }
    };

    let run = match validate_reduction(
        &rc.system,
        &gp,
        &rc.control,
        &rc.grid,
        &orders,
        &plan,
        BoundPolicy::SkipIfUnsymmetric,
    ) {
        Ok(r) => r,
        Err(e) => {
            messages.push(format!("validation failed: {e}"));
            return Ok(CmdOutcome {
                exit: exit_code_for(&e),
                messages,
            });
        }
    };

    write_json(&validate_dir.join("bound_reports.json"), &run.reports)?;
    write_json(
        &validate_dir.join("reduced_gramian_reports.json"),
        &serde_json::json!({
            "reach": run.reduced_reach,
            "obs": run.reduced_obs,
        }),
    )?;
    let csv_rows: Vec<Vec<f64>> = run
        .reports
        .iter()
        .map(|rep| {
            vec![
                rep.r as f64,
                rep.hsv_tail,
                rep.bound_value.unwrap_or(f64::NAN),
                rep.mc_error.unwrap_or(f64::NAN),
                rep.mc_error_se.unwrap_or(f64::NAN),
            ]
        })
        .collect();
    write_csv(
        &plots_dir.join("validate.csv"),
        "r,hsv_tail,bound,mc_error,stderr",
        &csv_rows,
    )?;

    for w in &run.warnings {
        messages.push(format!("warning: {w}"));
    }
    for f in &run.findings {
        messages.push(format!("finding: {f}"));
    }

    let bound_applicable = run.reports.iter().all(|r| r.bound_applicable);
    let all_satisfied = run
        .reports
        .iter()
        .all(|r| r.satisfied.unwrap_or(false));
    for rep in &run.reports {
        match (rep.bound_value, rep.mc_error) {
            (Some(b), Some(e)) => messages.push(format!(
                "r = {}: mc_error {:.6e} vs bound {:.6e} -> {}",
                rep.r,
                e,
                b,
                if rep.satisfied == Some(true) { "ok" } else { "VIOLATED" }
            )),
            (None, Some(e)) => messages.push(format!(
                "r = {}: mc_error {:.6e}, bound not applicable",
                rep.r, e
            )),
            _ => {}
        }
    }
    write_metadata(&dir, "validate", started)?;

    let exit = if !bound_applicable {
        messages.push("bound not applicable (missing point symmetry); HSVs and mc_error emitted".into());
        2
    } else if !all_satisfied {
        3
    } else {
        0
    };
    Ok(CmdOutcome { exit, messages })
}

pub fn cmd_simulate(rc: &ResolvedConfig, dump_trajectories: bool) -> Result<CmdOutcome, String> {
    let started = Instant::now();
    let dir = rc.output_dir.clone();
    let sim_dir = dir.join("simulate");
    let plots_dir = dir.join("plots");
    ensure_dir(&sim_dir)?;
    ensure_dir(&plots_dir)?;

    let mut messages = Vec::new();
    let result = match simulate(&rc.system, &rc.control, &rc.x0, &rc.grid) {
        Ok(r) => r,
        Err(e) => {
            messages.push(format!("simulation failed: {e}"));
            return Ok(CmdOutcome {
                exit: exit_code_for(&e),
                messages,
            });
        }
    };

    write_json(&sim_dir.join("summary.json"), &result)?;
    let out_rows: Vec<Vec<f64>> = result
        .times
        .iter()
        .zip(result.output_mean_sq.iter().zip(&result.output_mean_sq_se))
        .map(|(t, (v, se))| vec![*t, *v, *se])
        .collect();
    write_csv(&plots_dir.join("output_mean_sq.csv"), "t,estimate,stderr", &out_rows)?;
    let state_rows: Vec<Vec<f64>> = result
        .times
        .iter()
        .zip(
            result
                .state_second_moment
                .iter()
                .zip(&result.state_second_moment_se),
        )
        .map(|(t, (v, se))| vec![*t, *v, *se])
        .collect();
    write_csv(
        &plots_dir.join("state_second_moment.csv"),
        "t,estimate,stderr",
        &state_rows,
    )?;
    messages.push(format!(
        "l2T output norm^2 = {:.6e} (se {:.1e}), divergent paths {}",
        result.l2t_norm_sq, result.l2t_norm_sq_se, result.divergent
    ));

    if dump_trajectories {
        let raw = match simulate_raw(&rc.system, &rc.control, &rc.x0, &rc.grid) {
            Ok(r) => r,
            Err(e) => {
                messages.push(format!("trajectory dump failed: {e}"));
                return Ok(CmdOutcome {
                    exit: exit_code_for(&e),
                    messages,
                });
            }
        };
        let path = sim_dir.join("trajectories.nlbt");
        write_trajectory_dump(&path, &raw)?;
        messages.push(format!("trajectories written to {}", path.display()));
    }

    write_metadata(&dir, "simulate", started)?;
    Ok(CmdOutcome { exit: 0, messages })
}

/// Binary dump: magic "NLBT", version u32, n u32, steps u32, paths u32,
/// then f64 state data (path-major, then time index, then component), all
/// little-endian.
fn write_trajectory_dump(path: &Path, raw: &nlbt_core::sim::RawTrajectories) -> Result<(), String> {
    let mut file =
        fs::File::create(path).map_err(|e| format!("creating {}: {e}", path.display()))?;
    let mut header = Vec::with_capacity(4 + 4 * 4);
    header.extend_from_slice(b"NLBT");
    header.extend_from_slice(&1u32.to_le_bytes());
    header.extend_from_slice(&(raw.n as u32).to_le_bytes());
    header.extend_from_slice(&(raw.steps as u32).to_le_bytes());
    header.extend_from_slice(&(raw.paths as u32).to_le_bytes());
    file.write_all(&header).map_err(|e| e.to_string())?;
    let mut buf = Vec::with_capacity(raw.data.len() * 8);
    for v in &raw.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&buf).map_err(|e| e.to_string())?;
    Ok(())
}

/// Export a builtin (or loaded) system description for editing.
pub fn cmd_export_system(rc: &ResolvedConfig, out: &Path) -> Result<CmdOutcome, String> {
    let schema = SystemSchema::from_system(&rc.system).map_err(|e| e.to_string())?;
    write_json(out, &schema)?;
    Ok(CmdOutcome {
        exit: 0,
        messages: vec![format!("system `{}` written to {}", rc.system_name, out.display())],
    })
}
