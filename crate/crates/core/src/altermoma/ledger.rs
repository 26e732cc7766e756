use std::io::Write;

use serde::Serialize;

use crate::error::Result;
use crate::model::Partition;

/// A prunable unit: one scalar, or one output channel in structured mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Unit {
    pub id: String,
    pub partition: Partition,
    /// `(parameter index, flat element index)` pairs.
    pub members: Vec<(usize, usize)>,
}

/// Indicators and score for one unit.
///
/// Camera entries carry `reri_mu_l0` (LiDAR-masked stage), LiDAR entries
/// carry `reri_mu_c0` (camera-masked stage), fusion entries carry both.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LedgerEntry {
    pub id: String,
    pub partition: Partition,
    pub deci: Option<f64>,
    pub reri_mu_l0: Option<f64>,
    pub reri_mu_c0: Option<f64>,
    pub score: Option<f64>,
    pub kept: Option<bool>,
}

impl LedgerEntry {
    pub fn new(id: impl Into<String>, partition: Partition) -> Self {
        Self {
            id: id.into(),
            partition,
            deci: None,
            reri_mu_l0: None,
            reri_mu_c0: None,
            score: None,
            kept: None,
        }
    }

    /// The single redundancy indicator of a backbone entry.
    pub fn reri(&self) -> Option<f64> {
        match self.partition {
            Partition::Camera => self.reri_mu_l0,
            Partition::Lidar => self.reri_mu_c0,
            Partition::Fusion => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImportanceLedger {
    pub method: String,
    pub structured: bool,
    pub entries: Vec<LedgerEntry>,
    #[serde(skip)]
    pub units: Vec<Unit>,
}

impl ImportanceLedger {
    pub fn new(method: impl Into<String>, structured: bool, units: Vec<Unit>) -> Self {
        let entries = units
            .iter()
            .map(|u| LedgerEntry::new(u.id.clone(), u.partition))
            .collect();
        Self {
            method: method.into(),
            structured,
            entries,
            units,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&LedgerEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries
            .iter()
            .map(|e| e.score.unwrap_or(f64::NEG_INFINITY))
            .collect()
    }

    pub fn set_scores(&mut self, scores: &[f64]) {
        for (e, s) in self.entries.iter_mut().zip(scores) {
            e.score = Some(*s);
        }
    }

    /// One CSV row per unit. Empty cells mark indicators the method does
    /// not produce.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "method",
            "id",
            "partition",
            "deci",
            "reri",
            "reri_mu_l0",
            "reri_mu_c0",
            "score",
            "kept",
        ])?;
        let cell = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for e in &self.entries {
            w.write_record([
                self.method.clone(),
                e.id.clone(),
                e.partition.to_string(),
                cell(e.deci),
                cell(e.reri()),
                cell(if e.partition == Partition::Fusion {
                    e.reri_mu_l0
                } else {
                    None
                }),
                cell(if e.partition == Partition::Fusion {
                    e.reri_mu_c0
                } else {
                    None
                }),
                cell(e.score),
                e.kept
                    .map(|k| if k { "1" } else { "0" }.to_owned())
                    .unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}
