//! CSV and JSON artifacts. Numbers use Rust's `Display`, which is
//! locale-independent and round-trips exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use abh_core::economy::ModelParams;
use abh_core::error::Result;
use abh_core::fd_oracle::SolutionField;
use abh_core::losses::LossBreakdown;
use abh_core::sampler::lattice;
use abh_core::trainer::write_atomic;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Times of the function slices.
pub const SLICE_TIMES: [f64; 4] = [1.0, 2.0, 5.0, 9.0];
pub const SLICE_NODES: usize = 101;
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub fn slice_name(t: f64) -> String {
    format!("slice_t{t}.csv")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Collects written files so the manifest can list their hashes.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub dir: PathBuf,
    pub files: Vec<(String, String)>,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Artifacts { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        self.files.retain(|(n, _)| n != name);
        self.files.push((name.to_string(), sha256_hex(bytes)));
        Ok(path)
    }
}

pub fn losses_csv(history: &[LossBreakdown]) -> String {
    let mut s = String::from("step");
    for c in LossBreakdown::COLUMNS {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    for (i, row) in history.iter().enumerate() {
        write!(s, "{i}").unwrap();
        for x in row.values() {
            write!(s, ",{x}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn timepaths_csv(model: &ModelParams, field: &dyn SolutionField, t_nodes: &[f64]) -> Result<String> {
    let mut s = String::from("t,K,Y,r,w\n");
    for &t in t_nodes {
        let k = field.capital(t);
        let p = model.prices_from_capital(k)?;
        writeln!(s, "{t},{k},{},{},{}", model.output(k), field.rate(t), p.w).unwrap();
    }
    Ok(s)
}

pub fn slice_csv(model: &ModelParams, field: &dyn SolutionField, t: f64) -> Result<String> {
    let a = lattice(model.a_min, model.a_max, SLICE_NODES);
    let z = lattice(model.z_min, model.z_max, SLICE_NODES);
    let pts: Vec<(f64, f64)> = a.iter().flat_map(|&a| z.iter().map(move |&z| (a, z))).collect();
    let f = field.fields(t, &pts)?;
    let mut s = String::from("a,z,v,c,g\n");
    for (k, (a, z)) in pts.iter().enumerate() {
        writeln!(s, "{a},{z},{},{},{}", f.v[k], f.c[k], f.g[k]).unwrap();
    }
    Ok(s)
}

/// Time paths and all slices for one solution.
pub fn write_solution(out: &mut Artifacts, model: &ModelParams, field: &dyn SolutionField, t_nodes: &[f64]) -> Result<()> {
    out.write("timepaths.csv", timepaths_csv(model, field, t_nodes)?.as_bytes())?;
    for t in SLICE_TIMES {
        out.write(&slice_name(t), slice_csv(model, field, t)?.as_bytes())?;
    }
    Ok(())
}

pub fn write_json(out: &mut Artifacts, name: &str, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("JSON values serialise");
    text.push('\n');
    out.write(name, text.as_bytes())?;
    Ok(())
}
