//! Fusion ablation driver. Rows are independent, so they are spread over up
//! to `XDKD_THREADS` worker threads; results come back in request order.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use xdkd_core::harness::{train, AblationKind, AblationRow, DistillConfig, Sample};
use xdkd_core::model::{DepthNet, ModelSpec};

use crate::error::{Error, Result};

pub const THREADS_VAR: &str = "XDKD_THREADS";

/// Worker count from `XDKD_THREADS`; 1 when unset.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::config(format!("{THREADS_VAR} must be a positive integer, got `{v}`"))),
        },
    }
}

pub fn parse_kinds(list: &str) -> Result<Vec<AblationKind>> {
    let kinds = list.split(',').map(|s| s.trim().parse::<AblationKind>()).collect::<xdkd_core::Result<Vec<_>>>()?;
    if kinds.is_empty() {
        return Err(Error::config("no ablation kinds given"));
    }
    Ok(kinds)
}

fn run_one(kind: AblationKind, base: &ModelSpec, model_seed: u64, data: &[Sample], eval: &[Sample], cfg: &DistillConfig) -> Result<AblationRow> {
    let mut model = DepthNet::new(&kind.spec(base), model_seed)?;
    let report = train(&mut model, data, eval, cfg, None)?;
    Ok(AblationRow { kind, param_count: model.param_count(), report })
}

pub fn run(
    kinds: &[AblationKind],
    base: &ModelSpec,
    model_seed: u64,
    data: &[Sample],
    eval: &[Sample],
    cfg: &DistillConfig,
    threads: usize,
) -> Result<Vec<AblationRow>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<AblationRow>>>> = Mutex::new((0..kinds.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, kinds.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&kind) = kinds.get(i) else { break };
                let row = run_one(kind, base, model_seed, data, eval, cfg);
                slots.lock().expect("no worker panicked")[i] = Some(row);
            });
        }
    });
    slots.into_inner().expect("no worker panicked").into_iter().map(|r| r.expect("every row ran")).collect()
}

/// One line per row: kind, parameter count, final loss, then metrics per cap.
/// The attention row is marked, since that fusion is a stand-in.
pub fn table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    for row in rows {
        let last = row.report.epochs.last().map_or(f64::NAN, |e| e.total);
        write!(out, "{:<14} params={:<8} final_total={last:.6}", row.kind.as_str(), row.param_count).unwrap();
        for m in &row.report.metrics {
            write!(out, " mae@{}={:.4} rmse@{}={:.4} d1@{}={:.4}", m.cap, m.mae, m.cap, m.rmse, m.cap, m.delta1).unwrap();
        }
        if row.kind == AblationKind::Attention {
            out.push_str(" note=sigmoid-gate-stand-in");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use xdkd_core::harness::samples;
    use xdkd_core::synthetic::{generate_scene, SceneParams};

    #[test]
    fn kinds_parse() {
        assert_eq!(parse_kinds("add, concatenate,film_no_daspp").unwrap(), vec![AblationKind::Add, AblationKind::Concat, AblationKind::FilmNoDaspp]);
        assert!(parse_kinds("add,sum").is_err());
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let scenes: Vec<_> = (0..2).map(|s| generate_scene(s, 32, 32, &SceneParams::default()).unwrap()).collect();
        let data = samples(&scenes).unwrap();
        let cfg = DistillConfig { epochs: 1, batch_size: 2, caps: vec![80.0], ..Default::default() };
        let kinds = [AblationKind::Concat, AblationKind::Add, AblationKind::FilmNoDaspp];
        let one = run(&kinds, &ModelSpec::student(), 3, &data, &data, &cfg, 1).unwrap();
        let three = run(&kinds, &ModelSpec::student(), 3, &data, &data, &cfg, 3).unwrap();
        assert_eq!(one, three);
        assert_eq!(one.iter().map(|r| r.kind).collect::<Vec<_>>(), kinds);
    }
}
