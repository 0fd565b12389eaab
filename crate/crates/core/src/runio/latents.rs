//! Latent CSV export: one row per evaluation control step.
//!
//! Columns: `episode_id, step, task_label, mu_l_0.., feat_0.., agent_variant`.
//! Empty `mu_l_*` cells mean no belief exists (vanilla agent).

use std::path::Path;

use thiserror::Error;

use crate::trainer::{AgentVariant, LatentRow};

#[derive(Debug, Error)]
pub enum LatentCsvError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("latent CSV: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable {
    pub variant: AgentVariant,
    pub mu_dim: usize,
    pub feat_dim: usize,
    pub rows: Vec<LatentRow>,
}

pub fn header(mu_dim: usize, feat_dim: usize) -> Vec<String> {
    let mut h = vec!["episode_id".to_string(), "step".to_string(), "task_label".to_string()];
    h.extend((0..mu_dim).map(|i| format!("mu_l_{i}")));
    h.extend((0..feat_dim).map(|i| format!("feat_{i}")));
    h.push("agent_variant".to_string());
    h
}

pub fn write(path: &Path, table: &LatentTable) -> Result<(), LatentCsvError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header(table.mu_dim, table.feat_dim))?;
    for r in &table.rows {
        if r.feat.len() != table.feat_dim || r.mu_l.as_ref().is_some_and(|m| m.len() != table.mu_dim) {
            return Err(LatentCsvError::Format(format!("row at step {} has the wrong width", r.step)));
        }
        let mut rec = vec![r.episode_id.to_string(), r.step.to_string(), r.task_label.clone()];
        match &r.mu_l {
            Some(m) => rec.extend(m.iter().map(|x| x.to_string())),
            None => rec.extend(std::iter::repeat_n(String::new(), table.mu_dim)),
        }
        rec.extend(r.feat.iter().map(|x| x.to_string()));
        rec.push(table.variant.name().to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

fn parse_variant(s: &str) -> Result<AgentVariant, LatentCsvError> {
    match s {
        "vanilla" => Ok(AgentVariant::Vanilla),
        "taskinfer" => Ok(AgentVariant::Taskinfer),
        "oracle" => Ok(AgentVariant::Oracle),
        _ => Err(LatentCsvError::Format(format!("unknown agent_variant `{s}`"))),
    }
}

fn num<T: std::str::FromStr>(s: &str, col: &str) -> Result<T, LatentCsvError> {
    s.parse().map_err(|_| LatentCsvError::Format(format!("bad value `{s}` in column {col}")))
}

pub fn read(path: &Path) -> Result<LatentTable, LatentCsvError> {
    let mut r = csv::Reader::from_path(path)?;
    let head: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mu_dim = head.iter().filter(|h| h.starts_with("mu_l_")).count();
    let feat_dim = head.iter().filter(|h| h.starts_with("feat_")).count();
    if head != header(mu_dim, feat_dim) {
        return Err(LatentCsvError::Format("header does not match the latent column contract".into()));
    }
    let mut rows = Vec::new();
    let mut variant = None;
    for rec in r.records() {
        let rec = rec?;
        let v = parse_variant(&rec[rec.len() - 1])?;
        if *variant.get_or_insert(v) != v {
            return Err(LatentCsvError::Format("mixed agent variants in one file".into()));
        }
        let mu: Vec<&str> = (0..mu_dim).map(|i| &rec[3 + i]).collect();
        let mu_l = if mu.iter().all(|s| s.is_empty()) && mu_dim > 0 {
            None
        } else {
            Some(mu.iter().map(|s| num(s, "mu_l")).collect::<Result<_, _>>()?)
        };
        rows.push(LatentRow {
            episode_id: num(&rec[0], "episode_id")?,
            step: num(&rec[1], "step")?,
            task_label: rec[2].to_string(),
            mu_l,
            feat: (0..feat_dim).map(|i| num(&rec[3 + mu_dim + i], "feat")).collect::<Result<_, _>>()?,
        });
    }
    let variant = variant.ok_or_else(|| LatentCsvError::Format("no data rows".into()))?;
    Ok(LatentTable { variant, mu_dim, feat_dim, rows })
}
