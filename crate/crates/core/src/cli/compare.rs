//! Seed aggregation and ranking across run directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::harness::eval::mean_std;
use crate::harness::read_eval;

pub const SCHEMA_VERSION: u32 = 1;
pub const MIN_SEEDS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    /// Mean over seeds of each seed's mean episode return.
    pub mean: f64,
    /// Population std of the per-seed means.
    pub std: f64,
    /// 1 is best. Ties on mean go to the lower std, then the variant name.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<PathBuf>,
    pub pools: BTreeMap<String, Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub schema_version: u32,
    pub env: String,
    pub pools: Vec<String>,
    pub variants: Vec<VariantRow>,
}

pub fn compare(dirs: &[PathBuf]) -> Result<CompareReport, CliError> {
    if dirs.len() < 2 {
        return Err(CliError::Usage("compare needs at least 2 run directories".into()));
    }
    let mut env: Option<String> = None;
    // variant -> pool -> [(seed, mean)]
    let mut groups: BTreeMap<String, (Vec<u64>, Vec<PathBuf>, BTreeMap<String, Vec<f64>>)> = BTreeMap::new();
    for dir in dirs {
        let file = read_eval(dir)?;
        match &env {
            None => env = Some(file.env.clone()),
            Some(e) if *e != file.env => {
                return Err(CliError::Usage(format!(
                    "refusing to compare runs from different environments: {e} and {} ({})",
                    file.env,
                    dir.display()
                )))
            }
            Some(_) => {}
        }
        let g = groups.entry(file.variant.clone()).or_default();
        if g.0.contains(&file.seed) {
            return Err(CliError::Usage(format!(
                "variant {} has seed {} twice ({})",
                file.variant,
                file.seed,
                dir.display()
            )));
        }
        g.0.push(file.seed);
        g.1.push(dir.clone());
        for (pool, s) in file.pools {
            g.2.entry(pool).or_default().push(s.mean);
        }
    }
    let pools: Vec<String> = {
        let mut all: Vec<String> = groups.values().flat_map(|g| g.2.keys().cloned()).collect();
        all.sort();
        all.dedup();
        all
    };
    for (variant, (seeds, runs, by_pool)) in &groups {
        if seeds.len() < MIN_SEEDS {
            return Err(CliError::Usage(format!(
                "variant {variant} has {} seed(s); at least {MIN_SEEDS} are required",
                seeds.len()
            )));
        }
        for pool in &pools {
            if by_pool.get(pool).map_or(0, Vec::len) != seeds.len() {
                let missing = runs.iter().find(|d| read_eval(d).map_or(true, |f| !f.pools.contains_key(pool)));
                return Err(CliError::Missing(format!(
                    "{} pool evaluation for variant {variant}{}",
                    pool,
                    missing.map(|d| format!(" in {}", d.display())).unwrap_or_default()
                )));
            }
        }
    }
    let mut variants: Vec<VariantRow> = groups
        .into_iter()
        .map(|(variant, (seeds, runs, by_pool))| {
            let pools = by_pool
                .into_iter()
                .map(|(p, means)| {
                    let (mean, std) = mean_std(&means);
                    (p, Cell { mean, std, rank: 0 })
                })
                .collect();
            VariantRow {
                variant,
                seeds,
                runs,
                pools,
            }
        })
        .collect();
    for pool in &pools {
        let mut order: Vec<usize> = (0..variants.len()).collect();
        order.sort_by(|&a, &b| {
            let (ca, cb) = (&variants[a].pools[pool], &variants[b].pools[pool]);
            cb.mean
                .total_cmp(&ca.mean)
                .then(ca.std.total_cmp(&cb.std))
                .then(variants[a].variant.cmp(&variants[b].variant))
        });
        for (rank, i) in order.into_iter().enumerate() {
            variants[i].pools.get_mut(pool).unwrap().rank = rank + 1;
        }
    }
    Ok(CompareReport {
        schema_version: SCHEMA_VERSION,
        env: env.unwrap_or_default(),
        pools,
        variants,
    })
}

impl CompareReport {
    /// Aligned text table, rows in variant order.
    pub fn table(&self) -> String {
        let mut header = vec!["variant".to_string(), "seeds".to_string()];
        for p in &self.pools {
            header.push(format!("{p} mean±std"));
            header.push(format!("{p} rank"));
        }
        let mut rows = vec![header];
        for v in &self.variants {
            let mut row = vec![v.variant.clone(), v.seeds.len().to_string()];
            for p in &self.pools {
                let c = &v.pools[p];
                row.push(format!("{:.3}±{:.3}", c.mean, c.std));
                row.push(c.rank.to_string());
            }
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!("env: {}\n", self.env);
        for r in rows {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

pub fn write_json(report: &CompareReport, path: &Path) -> Result<(), CliError> {
    std::fs::write(path, serde_json::to_string_pretty(report).map_err(|e| CliError::Other(e.to_string()))? + "\n")
        .map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}
