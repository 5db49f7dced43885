//! Multi-input convolutional regressor for nonlinear transmissibilities:
//! one branch per input role, concatenated into a dense trunk.

pub mod layers;
pub mod train;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Normalization, Role};
use crate::error::{format_err, invalid, Error, Result};
use crate::io;
use crate::mesh::DomainKind;
pub use layers::{Act, LayerSpec};
use layers::{pooled, Cache, DropoutMode};
pub use train::{evaluate, grad_check, train, Metrics, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    /// Index of the input role this branch reads.
    pub role: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub fine_maps: [usize; 2],
    pub coarse_maps: [usize; 2],
    pub branch_width: usize,
    pub trunk_width: usize,
    pub dropout: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            fine_maps: [8, 16],
            coarse_maps: [4, 8],
            branch_width: 50,
            trunk_width: 200,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub kind: DomainKind,
    pub roles: Vec<Role>,
    pub branches: Vec<BranchSpec>,
    pub trunk: Vec<LayerSpec>,
    pub n_outputs: usize,
}

fn out_width(layers: &[LayerSpec]) -> usize {
    layers
        .iter()
        .rev()
        .find_map(|l| match *l {
            LayerSpec::Dense { nout, .. } => Some(nout),
            _ => None,
        })
        .unwrap_or(0)
}

impl Topology {
    /// Fine roles: (conv, ReLU, pool, dropout) x 2; window roles: (conv,
    /// ReLU, dropout) x 2; every branch ends in flatten + dense + ReLU. The
    /// trunk is dense + ReLU + dropout, then a linear output layer.
    pub fn standard(kind: DomainKind, roles: &[Role], n_outputs: usize, arch: &ArchConfig) -> Self {
        let drop = LayerSpec::Dropout { rate: arch.dropout };
        let branches = roles
            .iter()
            .enumerate()
            .map(|(r, role)| {
                let maps = if role.fine { arch.fine_maps } else { arch.coarse_maps };
                let (mut h, mut w) = (role.rows, role.cols);
                let mut layers = Vec::new();
                let mut cin = role.channels;
                for &m in &maps {
                    layers.push(LayerSpec::Conv3x3 { cin, cout: m });
                    layers.push(LayerSpec::Relu);
                    if role.fine {
                        layers.push(LayerSpec::MaxPool2);
                        h = pooled(h);
                        w = pooled(w);
                    }
                    layers.push(drop);
                    cin = m;
                }
                layers.push(LayerSpec::Flatten);
                layers.push(LayerSpec::Dense {
                    nin: cin * h * w,
                    nout: arch.branch_width,
                });
                layers.push(LayerSpec::Relu);
                BranchSpec { role: r, layers }
            })
            .collect::<Vec<_>>();
        let concat = arch.branch_width * branches.len();
        let trunk = vec![
            LayerSpec::Dense {
                nin: concat,
                nout: arch.trunk_width,
            },
            LayerSpec::Relu,
            drop,
            LayerSpec::Dense {
                nin: arch.trunk_width,
                nout: n_outputs,
            },
        ];
        Self {
            kind,
            roles: roles.to_vec(),
            branches,
            trunk,
            n_outputs,
        }
    }

    pub fn n_params(&self) -> usize {
        self.branches
            .iter()
            .flat_map(|b| &b.layers)
            .chain(&self.trunk)
            .map(LayerSpec::n_params)
            .sum()
    }

    pub fn input_len(&self) -> usize {
        self.roles.iter().map(Role::len).sum()
    }

    fn validate(&self) -> Result<()> {
        let concat: usize = self.branches.iter().map(|b| out_width(&b.layers)).sum();
        match self.trunk.first() {
            Some(LayerSpec::Dense { nin, .. }) if *nin == concat => {}
            None if concat == self.n_outputs => {}
            _ => return invalid("trunk input width does not match the branch outputs"),
        }
        let last = if self.trunk.is_empty() {
            concat
        } else {
            out_width(&self.trunk)
        };
        if last != self.n_outputs {
            return invalid("output width does not match n_outputs");
        }
        if self.branches.iter().any(|b| b.role >= self.roles.len()) {
            return invalid("branch reads a missing role");
        }
        Ok(())
    }
}

/// Input of one branch for a batch: `x` holds unique rows, `gather[i]` is
/// the row used by batch entry `i`. With `embedded`, `x` is already the
/// branch output and the branch layers are skipped.
#[derive(Debug, Clone)]
pub struct Feed {
    pub x: Act,
    pub gather: Vec<usize>,
    pub embedded: bool,
}

pub struct Trace {
    branch: Vec<Vec<Cache>>,
    widths: Vec<usize>,
    rows: Vec<usize>,
    trunk: Vec<Cache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub topology: Topology,
    pub params: Vec<f64>,
    pub norm: Option<Normalization>,
    branch_offsets: Vec<Vec<usize>>,
    trunk_offsets: Vec<usize>,
}

fn offsets(layers: &[LayerSpec], start: &mut usize) -> Vec<usize> {
    layers
        .iter()
        .map(|l| {
            let o = *start;
            *start += l.n_params();
            o
        })
        .collect()
}

/// Packs rows of one role (`[channel][row][col]` each) into a spatial batch.
pub fn pack_role(role: &Role, rows: &[&[f64]]) -> Act {
    let n = rows.len();
    let plane = role.plane();
    let mut data = vec![0.0; n * role.len()];
    for (i, r) in rows.iter().enumerate() {
        for ch in 0..role.channels {
            let dst = (ch * n + i) * plane;
            data[dst..dst + plane].copy_from_slice(&r[ch * plane..(ch + 1) * plane]);
        }
    }
    Act::spatial(n, role.channels, role.rows, role.cols, data)
}

impl Model {
    pub fn zeros(topology: Topology) -> Result<Self> {
        topology.validate()?;
        let mut at = 0;
        let branch_offsets = topology.branches.iter().map(|b| offsets(&b.layers, &mut at)).collect();
        let trunk_offsets = offsets(&topology.trunk, &mut at);
        Ok(Self {
            params: vec![0.0; at],
            topology,
            norm: None,
            branch_offsets,
            trunk_offsets,
        })
    }

    /// He-uniform weights (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`), zero biases.
    pub fn new(topology: Topology, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(topology)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<(LayerSpec, usize)> = m
            .topology
            .branches
            .iter()
            .zip(&m.branch_offsets)
            .flat_map(|(b, o)| b.layers.iter().copied().zip(o.iter().copied()))
            .chain(m.topology.trunk.iter().copied().zip(m.trunk_offsets.iter().copied()))
            .collect();
        for (l, off) in layers {
            let fan = l.fan_in();
            if fan == 0 {
                continue;
            }
            let bound = (6.0 / fan as f64).sqrt();
            for v in &mut m.params[off..off + l.n_weights()] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(m)
    }

    fn layer_params<'a>(&self, params: &'a [f64], layers: &[LayerSpec], offs: &[usize], k: usize) -> &'a [f64] {
        &params[offs[k]..offs[k] + layers[k].n_params()]
    }

    /// Runs the layers of branch `b` on raw inputs.
    pub fn branch_forward(&self, b: usize, x: Act, dropout: &mut DropoutMode, keep: bool) -> (Act, Vec<Cache>) {
        let br = &self.topology.branches[b];
        let mut caches = Vec::new();
        let mut x = x;
        for k in 0..br.layers.len() {
            let p = self.layer_params(&self.params, &br.layers, &self.branch_offsets[b], k);
            let (y, c) = layers::forward(&br.layers[k], p, x, dropout, keep);
            x = y;
            caches.extend(c);
        }
        (x, caches)
    }

    /// Batch forward pass; returns `[batch][n_outputs]`.
    pub fn forward_batch(&self, feeds: &[Feed], batch: usize, dropout: &mut DropoutMode, keep: bool) -> Result<(Vec<f64>, Option<Trace>)> {
        let t = &self.topology;
        if feeds.len() != t.branches.len() {
            return Err(Error::Shape(format!("{} feeds for {} branches", feeds.len(), t.branches.len())));
        }
        let mut outs = Vec::with_capacity(feeds.len());
        let mut branch_caches = Vec::with_capacity(feeds.len());
        for (b, feed) in feeds.iter().enumerate() {
            if feed.gather.len() != batch || feed.gather.iter().any(|&g| g >= feed.x.n) {
                return Err(Error::Shape(format!("branch {b}: gather does not match the batch")));
            }
            if feed.embedded {
                outs.push(feed.x.clone());
                branch_caches.push(Vec::new());
                continue;
            }
            let role = &t.roles[t.branches[b].role];
            if feed.x.c != role.channels || feed.x.h != role.rows || feed.x.w != role.cols {
                return Err(Error::Shape(format!(
                    "branch {b}: got {}x{}x{}, expected {}x{}x{}",
                    feed.x.c, feed.x.h, feed.x.w, role.channels, role.rows, role.cols
                )));
            }
            let (y, c) = self.branch_forward(b, feed.x.clone(), dropout, keep);
            outs.push(y);
            branch_caches.push(c);
        }
        let widths: Vec<usize> = outs.iter().map(Act::features).collect();
        let total: usize = widths.iter().sum();
        let mut cat = vec![0.0; batch * total];
        for i in 0..batch {
            let mut off = i * total;
            for (b, o) in outs.iter().enumerate() {
                let w = widths[b];
                let r = feeds[b].gather[i];
                cat[off..off + w].copy_from_slice(&o.data[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let mut x = Act::flat(batch, total, cat);
        let mut trunk = Vec::new();
        for k in 0..t.trunk.len() {
            let p = self.layer_params(&self.params, &t.trunk, &self.trunk_offsets, k);
            let (y, c) = layers::forward(&t.trunk[k], p, x, dropout, keep);
            x = y;
            trunk.extend(c);
        }
        let trace = keep.then(|| Trace {
            branch: branch_caches,
            widths,
            rows: outs.iter().map(|o| o.n).collect(),
            trunk,
        });
        Ok((x.data, trace))
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d output`.
    pub fn backward(&self, feeds: &[Feed], trace: &Trace, dout: &[f64], grads: &mut [f64]) {
        let t = &self.topology;
        let batch = dout.len() / t.n_outputs.max(1);
        let mut dy = Act::flat(batch, t.n_outputs, dout.to_vec());
        for k in (0..t.trunk.len()).rev() {
            let (o, len) = (self.trunk_offsets[k], t.trunk[k].n_params());
            let (p, g) = (&self.params[o..o + len], &mut grads[o..o + len]);
            dy = layers::backward(&t.trunk[k], p, g, &trace.trunk[k], dy);
        }
        let total: usize = trace.widths.iter().sum();
        let mut off = 0;
        for (b, feed) in feeds.iter().enumerate() {
            let w = trace.widths[b];
            if feed.embedded {
                off += w;
                continue;
            }
            let mut d = vec![0.0; trace.rows[b] * w];
            for i in 0..batch {
                let r = feed.gather[i];
                for j in 0..w {
                    d[r * w + j] += dy.data[i * total + off + j];
                }
            }
            let br = &t.branches[b];
            let mut dx = Act::flat(trace.rows[b], w, d);
            for k in (0..br.layers.len()).rev() {
                let (o, len) = (self.branch_offsets[b][k], br.layers[k].n_params());
                let (p, g) = (&self.params[o..o + len], &mut grads[o..o + len]);
                dx = layers::backward(&br.layers[k], p, g, &trace.branch[b][k], dx);
            }
            off += w;
        }
    }

    /// Splits a concatenated input vector into per-branch feeds for a batch.
    pub fn feeds(&self, inputs: &[&[f64]]) -> Result<Vec<Feed>> {
        let t = &self.topology;
        let mut starts = Vec::with_capacity(t.roles.len());
        let mut at = 0;
        for r in &t.roles {
            starts.push(at);
            at += r.len();
        }
        if let Some(bad) = inputs.iter().find(|x| x.len() != at) {
            return Err(Error::Shape(format!("input has {} values, expected {at}", bad.len())));
        }
        let n = inputs.len();
        Ok(t.branches
            .iter()
            .map(|b| {
                let role = &t.roles[b.role];
                let rows: Vec<&[f64]> = inputs.iter().map(|x| &x[starts[b.role]..starts[b.role] + role.len()]).collect();
                Feed {
                    x: pack_role(role, &rows),
                    gather: (0..n).collect(),
                    embedded: false,
                }
            })
            .collect())
    }

    /// Inference on one sample (normalized inputs, all roles concatenated).
    pub fn forward(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let feeds = self.feeds(&[inputs])?;
        let (y, _) = self.forward_batch(&feeds, 1, &mut DropoutMode::Off, false)?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite prediction".into()));
        }
        Ok(y)
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    endianness: String,
    n_params: usize,
    topology: Topology,
    norm: Option<Normalization>,
}

impl Model {
    /// JSON header line, blank line, then little-endian f64 weights.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            format: "nlup-surrogate".into(),
            version: CHECKPOINT_VERSION,
            endianness: "little".into(),
            n_params: self.params.len(),
            topology: self.topology.clone(),
            norm: self.norm.clone(),
        };
        io::write_header_blob(path, &serde_json::to_string(&header)?, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (text, params) = io::read_header_blob(path)?;
        let header: CheckpointHeader = serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
        if header.format != "nlup-surrogate" || header.endianness != "little" {
            return Err(format_err(path, "not a surrogate checkpoint"));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: header.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut m = Self::zeros(header.topology)?;
        if params.len() != header.n_params || params.len() != m.params.len() {
            return Err(format_err(
                path,
                format!("expected {} weights, found {}", m.params.len(), params.len()),
            ));
        }
        m.params = params;
        m.norm = header.norm;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_topology() -> Topology {
        let roles = vec![
            Role {
                name: "img".into(),
                channels: 1,
                rows: 4,
                cols: 6,
                fine: true,
            },
            Role {
                name: "win".into(),
                channels: 2,
                rows: 3,
                cols: 3,
                fine: false,
            },
        ];
        let arch = ArchConfig {
            fine_maps: [2, 3],
            coarse_maps: [2, 2],
            branch_width: 4,
            trunk_width: 5,
            dropout: 0.1,
        };
        Topology::standard(DomainKind::Mf, &roles, 2, &arch)
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = Model::zeros(small_topology()).unwrap();
        let x = vec![0.0; m.topology.input_len()];
        assert_eq!(m.forward(&x).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identical_samples_identical_outputs_and_shape_errors() {
        let m = Model::new(small_topology(), 3).unwrap();
        let x: Vec<f64> = (0..m.topology.input_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let feeds = m.feeds(&[&x, &x]).unwrap();
        let (y, _) = m.forward_batch(&feeds, 2, &mut DropoutMode::Off, false).unwrap();
        assert_eq!(y[0..2], y[2..4]);
        assert_eq!(m.forward(&x).unwrap(), y[0..2].to_vec());
        assert!(m.forward(&x[1..]).is_err());
    }

    #[test]
    fn batched_backward_with_shared_rows_matches_differences() {
        let m = Model::new(small_topology(), 8).unwrap();
        let len = m.topology.input_len();
        let xs: Vec<Vec<f64>> = (0..3)
            .map(|s| (0..len).map(|i| ((i * 5 + s * 3) % 13) as f64 / 13.0 - 0.4).collect())
            .collect();
        let mut feeds = m.feeds(&[&xs[0], &xs[1], &xs[2]]).unwrap();
        // first branch: samples 0 and 2 share one row
        let role = &m.topology.roles[0];
        let r0 = &xs[0][..role.len()];
        let r1 = &xs[1][..role.len()];
        feeds[0] = Feed {
            x: pack_role(role, &[r0, r1]),
            gather: vec![0, 1, 0],
            embedded: false,
        };
        let loss = |m: &Model| {
            let (y, _) = m.forward_batch(&feeds, 3, &mut DropoutMode::Off, false).unwrap();
            y.iter().enumerate().map(|(k, v)| (k as f64 + 1.0) * v).sum::<f64>()
        };
        let (y, trace) = m.forward_batch(&feeds, 3, &mut DropoutMode::Off, true).unwrap();
        let dout: Vec<f64> = (0..y.len()).map(|k| k as f64 + 1.0).collect();
        let mut g = vec![0.0; m.params.len()];
        m.backward(&feeds, &trace.unwrap(), &dout, &mut g);
        let mut probe = m.clone();
        let mut worst = 0.0f64;
        for i in (0..m.params.len()).step_by(3) {
            probe.params[i] = m.params[i] + 1e-6;
            let lp = loss(&probe);
            probe.params[i] = m.params[i] - 1e-6;
            let lm = loss(&probe);
            probe.params[i] = m.params[i];
            let fd = (lp - lm) / 2e-6;
            worst = worst.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6));
        }
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn standard_topology_matches_desk_shapes() {
        let roles = vec![
            Role {
                name: "log-k".into(),
                channels: 1,
                rows: 16,
                cols: 32,
                fine: true,
            },
            Role {
                name: "pm".into(),
                channels: 2,
                rows: 3,
                cols: 4,
                fine: false,
            },
        ];
        let t = Topology::standard(DomainKind::MmVertical, &roles, 1, &ArchConfig::default());
        assert_eq!(t.branches[0].layers[9], LayerSpec::Dense { nin: 16 * 4 * 8, nout: 50 });
        assert_eq!(t.branches[1].layers[7], LayerSpec::Dense { nin: 8 * 12, nout: 50 });
        assert_eq!(t.trunk[0], LayerSpec::Dense { nin: 100, nout: 200 });
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let mut m = Model::new(small_topology(), 11).unwrap();
        m.norm = Some(Normalization {
            input_min: vec![0.0, -1.0],
            input_max: vec![1.0, 2.0],
            target_min: vec![0.5, 0.1],
            target_max: vec![3.0, 0.2],
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back, m);
        let x: Vec<f64> = (0..m.topology.input_len()).map(|i| (i as f64).cos()).collect();
        let (a, b) = (m.forward(&x).unwrap(), back.forward(&x).unwrap());
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(Model::load(&path).is_err());
        let text = String::from_utf8_lossy(&bytes).replacen("\"version\":1", "\"version\":9", 1);
        let cut = text.find("\n\n").unwrap();
        let mut edited = text.as_bytes()[..cut].to_vec();
        edited.extend_from_slice(&bytes[cut..]);
        std::fs::write(&path, &edited).unwrap();
        assert!(matches!(Model::load(&path), Err(Error::Version { found: 9, .. })));
    }
}
