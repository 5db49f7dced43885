use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coarse_solver::SelectorStats;
use crate::error::{format_err, Result};
use crate::io;

/// Named f64 arrays behind a JSON header.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub meta: serde_json::Value,
    arrays: Vec<(String, Vec<usize>, Vec<f64>)>,
}

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    format: String,
    version: u32,
    meta: serde_json::Value,
    arrays: Vec<(String, Vec<usize>)>,
}

impl Bundle {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, arrays: Vec::new() }
    }

    pub fn put(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.push((name.into(), shape, data));
    }

    /// Rows of equal length as a 2-D array.
    pub fn put_rows(&mut self, name: &str, rows: &[Vec<f64>]) {
        let n = rows.first().map_or(0, |r| r.len());
        self.put(name, vec![rows.len(), n], rows.concat());
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.arrays.iter().find(|a| a.0 == name).map(|a| a.2.as_slice())
    }

    pub fn rows(&self, name: &str) -> Option<Vec<Vec<f64>>> {
        let (_, shape, data) = self.arrays.iter().find(|a| a.0 == name)?;
        let n = shape.get(1).copied().unwrap_or(0);
        if n == 0 {
            return Some(vec![Vec::new(); shape[0]]);
        }
        Some(data.chunks(n).map(|c| c.to_vec()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = BundleHeader {
            format: "nlup-bundle".into(),
            version: 1,
            meta: self.meta.clone(),
            arrays: self.arrays.iter().map(|a| (a.0.clone(), a.1.clone())).collect(),
        };
        let payload: Vec<f64> = self.arrays.iter().flat_map(|a| a.2.iter().copied()).collect();
        io::write_header_blob(path, &serde_json::to_string(&header)?, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (text, payload) = io::read_header_blob(path)?;
        let h: BundleHeader = serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
        if h.format != "nlup-bundle" || h.version != 1 {
            return Err(format_err(path, "not a version 1 bundle"));
        }
        let mut arrays = Vec::new();
        let mut at = 0;
        for (name, shape) in h.arrays {
            let n: usize = shape.iter().product();
            if at + n > payload.len() {
                return Err(format_err(path, "payload shorter than declared arrays"));
            }
            arrays.push((name, shape, payload[at..at + n].to_vec()));
            at += n;
        }
        if at != payload.len() {
            return Err(format_err(path, "payload longer than declared arrays"));
        }
        Ok(Self { meta: h.meta, arrays })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
}

/// One fine run reduced to coarse quantities: averages and extracted
/// transmissibilities per time level.
#[derive(Debug, Clone, PartialEq)]
pub struct FineRecord {
    pub name: String,
    pub q: f64,
    pub p: Vec<Vec<f64>>,
    pub s: Option<Vec<Vec<f64>>>,
    pub t_nl: Vec<Vec<f64>>,
    pub tw_nl: Option<Vec<Vec<f64>>>,
    pub flux: Vec<Vec<f64>>,
    pub dp: Vec<Vec<f64>>,
    /// Worst relative mass-balance defect per step.
    pub balance: Vec<f64>,
    /// Fine saturation range per step.
    pub s_min: Vec<f64>,
    pub s_max: Vec<f64>,
    /// Explicit transport step bound per step (two-phase).
    pub tau_limit: Vec<f64>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct FineMeta {
    kind: String,
    name: String,
    q: f64,
    provenance: Provenance,
}

impl FineRecord {
    pub fn n_steps(&self) -> usize {
        self.p.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = FineMeta {
            kind: "fine-run".into(),
            name: self.name.clone(),
            q: self.q,
            provenance: self.provenance.clone(),
        };
        let mut b = Bundle::new(serde_json::to_value(meta)?);
        b.put_rows("p", &self.p);
        if let Some(s) = &self.s {
            b.put_rows("s", s);
        }
        b.put_rows("t_nl", &self.t_nl);
        if let Some(t) = &self.tw_nl {
            b.put_rows("tw_nl", t);
        }
        b.put_rows("flux", &self.flux);
        b.put_rows("dp", &self.dp);
        b.put("balance", vec![self.balance.len()], self.balance.clone());
        b.put("s_min", vec![self.s_min.len()], self.s_min.clone());
        b.put("s_max", vec![self.s_max.len()], self.s_max.clone());
        b.put("tau_limit", vec![self.tau_limit.len()], self.tau_limit.clone());
        b.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b = Bundle::load(path)?;
        let meta: FineMeta = serde_json::from_value(b.meta.clone()).map_err(|e| format_err(path, e.to_string()))?;
        let need = |name: &str| b.rows(name).ok_or_else(|| format_err(path, format!("missing array {name}")));
        let flat = |name: &str| {
            b.get(name)
                .map(|v| v.to_vec())
                .ok_or_else(|| format_err(path, format!("missing array {name}")))
        };
        Ok(Self {
            name: meta.name,
            q: meta.q,
            p: need("p")?,
            s: b.rows("s"),
            t_nl: need("t_nl")?,
            tw_nl: b.rows("tw_nl"),
            flux: need("flux")?,
            dp: need("dp")?,
            balance: flat("balance")?,
            s_min: flat("s_min")?,
            s_max: flat("s_max")?,
            tau_limit: flat("tau_limit")?,
            provenance: meta.provenance,
        })
    }
}

/// Classic and surrogate coarse solutions of one test run.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseRecord {
    pub name: String,
    pub up_p: Vec<Vec<f64>>,
    pub up_s: Option<Vec<Vec<f64>>>,
    pub nl_p: Vec<Vec<f64>>,
    pub nl_s: Option<Vec<Vec<f64>>>,
    pub per_step: Vec<SelectorStats>,
    pub stats: SelectorStats,
    /// Worst mass-balance defect over both solves, per step.
    pub balance: Vec<f64>,
    /// Coarse saturation range over both solves, per step.
    pub s_min: Vec<f64>,
    pub s_max: Vec<f64>,
    /// Smaller transport step bound of the two solves, per step.
    pub tau_limit: Vec<f64>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct CoarseMeta {
    kind: String,
    name: String,
    per_step: Vec<SelectorStats>,
    stats: SelectorStats,
    provenance: Provenance,
}

impl CoarseRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CoarseMeta {
            kind: "coarse-run".into(),
            name: self.name.clone(),
            per_step: self.per_step.clone(),
            stats: self.stats,
            provenance: self.provenance.clone(),
        };
        let mut b = Bundle::new(serde_json::to_value(meta)?);
        b.put_rows("up_p", &self.up_p);
        b.put_rows("nl_p", &self.nl_p);
        if let (Some(u), Some(n)) = (&self.up_s, &self.nl_s) {
            b.put_rows("up_s", u);
            b.put_rows("nl_s", n);
        }
        b.put("balance", vec![self.balance.len()], self.balance.clone());
        b.put("s_min", vec![self.s_min.len()], self.s_min.clone());
        b.put("s_max", vec![self.s_max.len()], self.s_max.clone());
        b.put("tau_limit", vec![self.tau_limit.len()], self.tau_limit.clone());
        b.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b = Bundle::load(path)?;
        let meta: CoarseMeta = serde_json::from_value(b.meta.clone()).map_err(|e| format_err(path, e.to_string()))?;
        let need = |name: &str| b.rows(name).ok_or_else(|| format_err(path, format!("missing array {name}")));
        let flat = |name: &str| {
            b.get(name)
                .map(|v| v.to_vec())
                .ok_or_else(|| format_err(path, format!("missing array {name}")))
        };
        Ok(Self {
            name: meta.name,
            up_p: need("up_p")?,
            up_s: b.rows("up_s"),
            nl_p: need("nl_p")?,
            nl_s: b.rows("nl_s"),
            per_step: meta.per_step,
            stats: meta.stats,
            balance: flat("balance")?,
            s_min: flat("s_min")?,
            s_max: flat("s_max")?,
            tau_limit: flat("tau_limit")?,
            provenance: meta.provenance,
        })
    }
}
