//! Append-only CSV logs. Floats carry 17 significant digits; missing
//! values are empty cells.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub const METRICS_COLUMNS: [&str; 11] = [
    "timestep",
    "episode_return",
    "eval_return_train_styles",
    "eval_return_test_styles",
    "l_div",
    "g_critic",
    "actor_loss",
    "critic_loss",
    "gen_loss",
    "entropy",
    "adversarial_active",
];

pub const UPDATE_COLUMNS: [&str; 7] = [
    "update",
    "timestep",
    "l_div",
    "g_critic",
    "actor_loss",
    "critic_loss",
    "gen_loss",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRecord {
    pub timestep: u64,
    pub episode_return: Option<f64>,
    pub eval_return_train_styles: Option<f64>,
    pub eval_return_test_styles: Option<f64>,
    pub l_div: Option<f64>,
    pub g_critic: Option<f64>,
    pub actor_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub gen_loss: Option<f64>,
    pub entropy: Option<f64>,
    pub adversarial_active: bool,
    /// Seconds since the start of training; written to a separate file so
    /// the metrics stream itself stays reproducible.
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateRecord {
    pub update: u64,
    pub timestep: u64,
    pub l_div: Option<f64>,
    pub g_critic: Option<f64>,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub gen_loss: Option<f64>,
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn cell(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

impl MetricsRecord {
    pub fn row(&self) -> String {
        [
            self.timestep.to_string(),
            cell(self.episode_return),
            cell(self.eval_return_train_styles),
            cell(self.eval_return_test_styles),
            cell(self.l_div),
            cell(self.g_critic),
            cell(self.actor_loss),
            cell(self.critic_loss),
            cell(self.gen_loss),
            cell(self.entropy),
            (self.adversarial_active as u8).to_string(),
        ]
        .join(",")
    }

    /// Losses present in the row, by column name, that are not finite.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("l_div", self.l_div),
            ("g_critic", self.g_critic),
            ("actor_loss", self.actor_loss),
            ("critic_loss", self.critic_loss),
            ("gen_loss", self.gen_loss),
        ]
        .into_iter()
        .find(|(_, v)| v.is_some_and(|v| !v.is_finite()))
        .map(|(n, _)| n)
    }
}

impl UpdateRecord {
    pub fn row(&self) -> String {
        [
            self.update.to_string(),
            self.timestep.to_string(),
            cell(self.l_div),
            cell(self.g_critic),
            fmt_f64(self.actor_loss),
            fmt_f64(self.critic_loss),
            cell(self.gen_loss),
        ]
        .join(",")
    }
}

/// Serialized writer for the run's three logs.
pub struct MetricsWriter {
    metrics: BufWriter<File>,
    updates: BufWriter<File>,
    timing: BufWriter<File>,
    last_timestep: Option<u64>,
}

impl MetricsWriter {
    pub fn create(dir: &Path) -> std::io::Result<Self> {
        let mut metrics = BufWriter::new(File::create(dir.join("metrics.csv"))?);
        writeln!(metrics, "{}", METRICS_COLUMNS.join(","))?;
        let mut updates = BufWriter::new(File::create(dir.join("updates.csv"))?);
        writeln!(updates, "{}", UPDATE_COLUMNS.join(","))?;
        let mut timing = BufWriter::new(File::create(dir.join("timing.csv"))?);
        writeln!(timing, "timestep,wall_time")?;
        Ok(Self {
            metrics,
            updates,
            timing,
            last_timestep: None,
        })
    }

    pub fn append(&mut self, r: &MetricsRecord) -> std::io::Result<()> {
        if let Some(prev) = self.last_timestep {
            if r.timestep <= prev {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidInput,
                    format!("metrics timestep {} not after {}", r.timestep, prev),
                ));
            }
        }
        self.last_timestep = Some(r.timestep);
        writeln!(self.metrics, "{}", r.row())?;
        writeln!(self.timing, "{},{}", r.timestep, fmt_f64(r.wall_time))?;
        self.metrics.flush()?;
        self.timing.flush()
    }

    pub fn append_update(&mut self, r: &UpdateRecord) -> std::io::Result<()> {
        writeln!(self.updates, "{}", r.row())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.metrics.flush()?;
        self.updates.flush()?;
        self.timing.flush()
    }
}

/// A parsed CSV log: header plus rows of optional numbers.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn read(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let columns: Vec<String> = lines
            .next()
            .unwrap_or_default()
            .split(',')
            .map(str::to_string)
            .collect();
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split(',')
                    .map(|c| if c.is_empty() { None } else { c.parse().ok() })
                    .collect()
            })
            .collect();
        Ok(Self { columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r.get(i).copied().flatten()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_significant_digits_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 12345.678901234567] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn missing_cells_are_empty() {
        let r = MetricsRecord {
            timestep: 5,
            actor_loss: Some(1.0),
            ..Default::default()
        };
        assert_eq!(r.row(), "5,,,,,,1.0000000000000000e0,,,,0");
    }
}
