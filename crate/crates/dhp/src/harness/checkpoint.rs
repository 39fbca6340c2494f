//! Versioned binary checkpoints: every parameter (including the trace
//! state), plus the consolidation importance maps and anchors.
//!
//! Layout (little-endian):
//!   magic "DHPCKPT\0" | version u32 | config-json (u32 len + bytes)
//!   | param count u32 | per param: name (u16 len + bytes), role u8,
//!     rows u32, cols u32, rows*cols f64
//!   | importance flag u8 | method u8, lambda/xi/gamma f64, tasks_seen u32,
//!     slow count u32, then 4 matrices per slow param
//!     (omega, anchor, path accumulator, task start)

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::consolidation::{ConsolidationMethod, ImportanceState};
use crate::error::{Error, Result};
use crate::model::{Mlp, MlpConfig, ParamRole};
use crate::ndcore::Matrix;
use crate::seeding::derive_rng;

const MAGIC: &[u8; 8] = b"DHPCKPT\0";
const VERSION: u32 = 1;
/// Hard cap on a single tensor, to keep hostile headers from allocating.
const MAX_ELEMS: usize = 1 << 26;

#[derive(Clone, Debug)]
pub struct ParamRecord {
    pub name: String,
    pub role: ParamRole,
    pub value: Matrix,
}

#[derive(Clone, Debug)]
pub struct ImportanceRecord {
    pub method: ConsolidationMethod,
    pub lambda: f64,
    pub xi: f64,
    pub gamma: f64,
    pub tasks_seen: usize,
    pub omega: Vec<Matrix>,
    pub anchors: Vec<Matrix>,
    pub path_acc: Vec<Matrix>,
    pub task_start: Vec<Matrix>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_config: MlpConfig,
    pub params: Vec<ParamRecord>,
    pub importance: Option<ImportanceRecord>,
}

fn role_tag(role: ParamRole) -> u8 {
    match role {
        ParamRole::SlowWeight => 0,
        ParamRole::Plasticity => 1,
        ParamRole::PlasticityRate => 2,
        ParamRole::State => 3,
    }
}

fn role_from(tag: u8) -> Result<ParamRole> {
    Ok(match tag {
        0 => ParamRole::SlowWeight,
        1 => ParamRole::Plasticity,
        2 => ParamRole::PlasticityRate,
        3 => ParamRole::State,
        t => return Err(Error::Checkpoint(format!("unknown role tag {t}"))),
    })
}

fn method_tag(m: ConsolidationMethod) -> u8 {
    match m {
        ConsolidationMethod::None => 0,
        ConsolidationMethod::OnlineEwc => 1,
        ConsolidationMethod::Si => 2,
        ConsolidationMethod::Mas => 3,
    }
}

fn method_from(tag: u8) -> Result<ConsolidationMethod> {
    Ok(match tag {
        0 => ConsolidationMethod::None,
        1 => ConsolidationMethod::OnlineEwc,
        2 => ConsolidationMethod::Si,
        3 => ConsolidationMethod::Mas,
        t => return Err(Error::Checkpoint(format!("unknown method tag {t}"))),
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(LittleEndian::read_u16(self.take(2)?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(LittleEndian::read_f64(self.take(8)?))
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        if rows == 0 || cols == 0 {
            return Err(Error::Checkpoint("zero matrix dimension".into()));
        }
        let elems = rows
            .checked_mul(cols)
            .filter(|&n| n <= MAX_ELEMS)
            .ok_or_else(|| Error::Checkpoint(format!("oversized matrix {rows}x{cols}")))?;
        let raw = self.take(elems * 8)?;
        let mut data = vec![0.0; elems];
        LittleEndian::read_f64_into(raw, &mut data);
        Ok(Matrix::from_vec(rows, cols, data))
    }
}

fn write_matrix(out: &mut Vec<u8>, m: &Matrix) {
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn from_model(model: &Mlp, importance: Option<&ImportanceState>) -> Self {
        let params = model
            .registry()
            .into_iter()
            .zip(model.param_values())
            .map(|(meta, value)| ParamRecord {
                name: meta.name,
                role: meta.role,
                value,
            })
            .collect();
        let importance = importance.map(|st| ImportanceRecord {
            method: st.method,
            lambda: st.lambda,
            xi: st.xi,
            gamma: st.gamma,
            tasks_seen: st.tasks_seen,
            omega: st.omega.clone(),
            anchors: st.anchors.clone(),
            path_acc: st.path_acc.clone(),
            task_start: st.task_start.clone(),
        });
        Checkpoint {
            model_config: model.config.clone(),
            params,
            importance,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.model_config).expect("config serializes");
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(role_tag(p.role));
            write_matrix(&mut out, &p.value);
        }
        match &self.importance {
            None => out.push(0),
            Some(imp) => {
                out.push(1);
                out.push(method_tag(imp.method));
                out.extend_from_slice(&imp.lambda.to_le_bytes());
                out.extend_from_slice(&imp.xi.to_le_bytes());
                out.extend_from_slice(&imp.gamma.to_le_bytes());
                out.extend_from_slice(&(imp.tasks_seen as u32).to_le_bytes());
                out.extend_from_slice(&(imp.omega.len() as u32).to_le_bytes());
                for k in 0..imp.omega.len() {
                    write_matrix(&mut out, &imp.omega[k]);
                    write_matrix(&mut out, &imp.anchors[k]);
                    write_matrix(&mut out, &imp.path_acc[k]);
                    write_matrix(&mut out, &imp.task_start[k]);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let cfg_len = r.u32()? as usize;
        if cfg_len > 1 << 20 {
            return Err(Error::Checkpoint("oversized config blob".into()));
        }
        let model_config: MlpConfig = serde_json::from_slice(r.take(cfg_len)?)
            .map_err(|e| Error::Checkpoint(format!("config json: {e}")))?;
        let n_params = r.u32()? as usize;
        if n_params > 4096 {
            return Err(Error::Checkpoint("implausible parameter count".into()));
        }
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?
                .to_string();
            let role = role_from(r.u8()?)?;
            let value = r.matrix()?;
            params.push(ParamRecord { name, role, value });
        }
        let importance = match r.u8()? {
            0 => None,
            1 => {
                let method = method_from(r.u8()?)?;
                let lambda = r.f64()?;
                let xi = r.f64()?;
                let gamma = r.f64()?;
                let tasks_seen = r.u32()? as usize;
                let n_slow = r.u32()? as usize;
                if n_slow > 4096 {
                    return Err(Error::Checkpoint("implausible slow-param count".into()));
                }
                let mut omega = Vec::with_capacity(n_slow);
                let mut anchors = Vec::with_capacity(n_slow);
                let mut path_acc = Vec::with_capacity(n_slow);
                let mut task_start = Vec::with_capacity(n_slow);
                for _ in 0..n_slow {
                    omega.push(r.matrix()?);
                    anchors.push(r.matrix()?);
                    path_acc.push(r.matrix()?);
                    task_start.push(r.matrix()?);
                }
                Some(ImportanceRecord {
                    method,
                    lambda,
                    xi,
                    gamma,
                    tasks_seen,
                    omega,
                    anchors,
                    path_acc,
                    task_start,
                })
            }
            t => return Err(Error::Checkpoint(format!("bad importance flag {t}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            model_config,
            params,
            importance,
        })
    }

    /// Rebuild the model (and importance state, when recorded).
    pub fn restore(&self) -> Result<(Mlp, Option<ImportanceState>)> {
        let mut rng = derive_rng(0, "ckpt-restore", 0);
        let mut model = Mlp::new(self.model_config.clone(), &mut rng)?;
        let registry = model.registry();
        if registry.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: config implies {}, checkpoint holds {}",
                registry.len(),
                self.params.len()
            )));
        }
        let mut values = Vec::with_capacity(self.params.len());
        for (meta, rec) in registry.iter().zip(&self.params) {
            if meta.name != rec.name || meta.role != rec.role {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: expected {} ({:?}), found {} ({:?})",
                    meta.name, meta.role, rec.name, rec.role
                )));
            }
            if (meta.rows, meta.cols) != rec.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {}: expected {}x{}, found {}x{}",
                    meta.name,
                    meta.rows,
                    meta.cols,
                    rec.value.rows(),
                    rec.value.cols()
                )));
            }
            values.push(rec.value.clone());
        }
        model.set_param_values(&values);
        let importance = match &self.importance {
            None => None,
            Some(imp) => {
                let mut st =
                    ImportanceState::new(imp.method, imp.lambda, imp.xi.max(f64::MIN_POSITIVE), imp.gamma, &model)?;
                st.xi = imp.xi;
                let expected = st.omega.len();
                if imp.omega.len() != expected {
                    return Err(Error::Checkpoint(format!(
                        "importance covers {} params, model has {} slow params",
                        imp.omega.len(),
                        expected
                    )));
                }
                for k in 0..expected {
                    for (label, stored, template) in [
                        ("omega", &imp.omega[k], &st.omega[k]),
                        ("anchor", &imp.anchors[k], &st.anchors[k]),
                        ("path_acc", &imp.path_acc[k], &st.path_acc[k]),
                        ("task_start", &imp.task_start[k], &st.task_start[k]),
                    ] {
                        if stored.shape() != template.shape() {
                            return Err(Error::Checkpoint(format!(
                                "importance {label} {k} shape mismatch"
                            )));
                        }
                    }
                }
                st.omega = imp.omega.clone();
                st.anchors = imp.anchors.clone();
                st.path_acc = imp.path_acc.clone();
                st.task_start = imp.task_start.clone();
                st.tasks_seen = imp.tasks_seen;
                Some(st)
            }
        };
        Ok((model, importance))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
