use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::config::{RunConfig, SweepCell};
use super::stages::{self, Layout};
use crate::error::{Error, Result};
use crate::evaluator::EvalReport;

/// Worker count: available cores, capped by `COST_THREADS` when set.
pub fn worker_threads() -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("COST_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(cap) if cap > 0 => cores.min(cap),
        _ => cores,
    }
}

fn run_cell(cfg: &RunConfig, layout: &Layout, cell: &SweepCell) -> Result<EvalReport> {
    let mut cfg = cfg.clone();
    cell.apply(&mut cfg.tokenizer);
    cfg.tokenizer.validate()?;
    stages::train_tokenizer(&cfg, layout)?;
    stages::assign(&cfg, layout)?;
    stages::train_generator(&cfg, layout)?;
    stages::evaluate(&cfg, layout)
}

/// Runs every axis combination in its own directory, then merges the reports serially.
pub fn sweep(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let axes = cfg
        .sweep
        .as_ref()
        .filter(|a| !a.is_empty())
        .ok_or_else(|| Error::Config("`sweep` needs at least one non-empty sweep axis".into()))?;
    if cfg.synthetic.is_some() && cfg.embeddings.is_none() && !layout.embeddings.exists() {
        stages::synth(cfg, layout)?;
    }
    stages::check_catalog(layout)?;
    let cells = axes.cells(&cfg.tokenizer);
    let root = layout.out.join("sweep");
    let results: Vec<Mutex<Option<Result<EvalReport>>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let threads = worker_threads().min(cells.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let cell_layout = layout.with_out(root.join(cell.name(i)));
                let outcome = run_cell(cfg, &cell_layout, cell);
                if let Err(e) = &outcome {
                    log::error!("sweep cell {} failed: {}", cell.name(i), e);
                }
                *results[i].lock().expect("result slot") = Some(outcome);
            });
        }
    });

    let mut csv = String::from("cell,K,M,d,tau");
    for k in &cfg.eval_ks {
        csv.push_str(&format!(",recall@{}", k));
    }
    for k in &cfg.eval_ks {
        csv.push_str(&format!(",ndcg@{}", k));
    }
    csv.push_str(",status\n");
    let mut failures = 0;
    for (i, (cell, slot)) in cells.iter().zip(results).enumerate() {
        csv.push_str(&format!("{},{},{},{},{}", cell.name(i), cell.codebook_size, cell.levels, cell.latent_dim, cell.tau));
        match slot.into_inner().expect("result slot") {
            Some(Ok(r)) => {
                for v in r.recall.iter().chain(&r.ndcg) {
                    csv.push_str(&format!(",{:.6}", v));
                }
                csv.push_str(",ok\n");
            }
            outcome => {
                failures += 1;
                for _ in 0..2 * cfg.eval_ks.len() {
                    csv.push_str(",NA");
                }
                let reason = match outcome {
                    Some(Err(e)) => e.to_string(),
                    _ => "not run".to_string(),
                };
                csv.push_str(&format!(",FAILED: {}\n", reason.replace([',', '\n'], ";")));
            }
        }
    }
    let merged = root.join("merged.csv");
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    std::fs::write(&merged, csv).map_err(|e| Error::io(&merged, e))?;
    log::info!("sweep: {} cells, {} failed, merged table at {}", cells.len(), failures, merged.display());
    Ok(())
}
