//! File formats: named-array containers, spectra, chains and OE results.
//!
//! # Array container
//!
//! ```text
//! offset 0       8 bytes   magic "VSWRARR1"
//! offset 8       u64 LE    header length H
//! offset 16      H bytes   UTF-8 JSON header
//! offset 16 + H            array payloads, f64 little-endian, in header order
//! ```
//!
//! The header is `{"kind": .., "attrs": {..}, "arrays": [{"name", "shape"}]}`.
//! Multi-dimensional arrays are column-major: the first index varies fastest.
//!
//! LUT files hold `aod_grid`, `h2o_grid`, `wavelengths` and the cubes
//! `rho_a`, `s`, `t` of shape `[n_aod, n_h2o, n]`, plus an optional
//! `solar_irradiance`. Component files hold `wavelengths` and, for each
//! label in `attrs.labels`, `mean/<label>` and `cov_lower/<label>` (the
//! lower triangle packed column by column).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, RetrievalError};
use crate::linalg::SpdMatrix;
use crate::mcmc::{AcceptCounts, Chain, ChainInit, McmcConfig};
use crate::model::{AtmLookupTable, StateVector, WavelengthGrid};
use crate::oe::{OeResult, Termination};
use crate::prior::MixtureComponent;

pub const MAGIC: &[u8; 8] = b"VSWRARR1";
const MAX_HEADER: u64 = 1 << 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    #[serde(default)]
    attrs: Value,
    arrays: Vec<ArraySpec>,
}

/// In-memory contents of an array container.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrayFile {
    pub kind: String,
    pub attrs: Value,
    pub arrays: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    order: Vec<String>,
}

impl ArrayFile {
    pub fn new(kind: impl Into<String>, attrs: Value) -> Self {
        ArrayFile {
            kind: kind.into(),
            attrs,
            arrays: BTreeMap::new(),
            order: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(RetrievalError::Dimension(format!(
                "array {name}: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        if self.arrays.insert(name.clone(), (shape, data)).is_none() {
            self.order.push(name);
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        self.arrays
            .get(name)
            .map(|(_, d)| d.as_slice())
            .ok_or_else(|| RetrievalError::Format(format!("missing array {name:?}")))
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.arrays.get(name).map(|(s, _)| s.as_slice())
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(RetrievalError::Format(format!("expected a {kind} file, found {:?}", self.kind)));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: self.kind.clone(),
            attrs: self.attrs.clone(),
            arrays: self
                .order
                .iter()
                .map(|n| ArraySpec {
                    name: n.clone(),
                    shape: self.arrays[n].0.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for n in &self.order {
            write_f64s(&mut w, &self.arrays[n].1)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(RetrievalError::Format(format!("{}: not an array container", path.display())));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len);
        if len > MAX_HEADER {
            return Err(RetrievalError::Format(format!("{}: header length {len}", path.display())));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut out = ArrayFile::new(header.kind, header.attrs);
        for spec in header.arrays {
            let n = spec.shape.iter().product::<usize>();
            let data = read_f64s(&mut r, n)
                .map_err(|e| RetrievalError::Format(format!("{}: array {}: {e}", path.display(), spec.name)))?;
            out.insert(spec.name, spec.shape, data)?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(RetrievalError::Format(format!("{}: trailing bytes", path.display())));
        }
        Ok(out)
    }
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// A lookup table with the solar irradiance it was generated for, if stored.
#[derive(Clone, Debug)]
pub struct LutFile {
    pub lut: AtmLookupTable,
    pub solar_irradiance: Option<Vec<f64>>,
}

pub fn write_lut(path: &Path, lut: &AtmLookupTable, solar_irradiance: Option<&[f64]>) -> Result<()> {
    let (na, nh, n) = (lut.aod_grid().len(), lut.h2o_grid().len(), lut.n_channels());
    let mut f = ArrayFile::new("lut", Value::Object(Default::default()));
    f.insert("aod_grid", vec![na], lut.aod_grid().to_vec())?;
    f.insert("h2o_grid", vec![nh], lut.h2o_grid().to_vec())?;
    f.insert("wavelengths", vec![n], lut.wavelengths().to_vec())?;
    f.insert("rho_a", vec![na, nh, n], lut.rho_a().to_vec())?;
    f.insert("s", vec![na, nh, n], lut.s().to_vec())?;
    f.insert("t", vec![na, nh, n], lut.t().to_vec())?;
    if let Some(e0) = solar_irradiance {
        f.insert("solar_irradiance", vec![e0.len()], e0.to_vec())?;
    }
    f.write(path)
}

pub fn read_lut(path: &Path) -> Result<LutFile> {
    let f = ArrayFile::read(path)?;
    f.expect_kind("lut")?;
    let lut = AtmLookupTable::new(
        f.get("aod_grid")?.to_vec(),
        f.get("h2o_grid")?.to_vec(),
        f.get("wavelengths")?.to_vec(),
        f.get("rho_a")?.to_vec(),
        f.get("s")?.to_vec(),
        f.get("t")?.to_vec(),
    )?;
    let solar_irradiance = f.arrays.get("solar_irradiance").map(|(_, d)| d.clone());
    Ok(LutFile { lut, solar_irradiance })
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> RetrievalError {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => RetrievalError::Io(io),
        kind => RetrievalError::Parse {
            path: path.display().to_string(),
            line,
            msg: format!("{kind:?}"),
        },
    }
}

fn check_header(path: &Path, rdr: &mut csv::Reader<File>, expected: &[&str]) -> Result<()> {
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?;
    let found: Vec<&str> = headers.iter().collect();
    if found != expected {
        return Err(RetrievalError::Parse {
            path: path.display().to_string(),
            line: 1,
            msg: format!("expected columns {expected:?}, found {found:?}"),
        });
    }
    Ok(())
}

/// Reads every record as numbers, with the line number of each.
fn numeric_rows(path: &Path, expected: &[&str]) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut rdr = csv_reader(path)?;
    check_header(path, &mut rdr, expected)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let vals = rec
            .iter()
            .map(|f| {
                f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| RetrievalError::Parse {
                    path: path.display().to_string(),
                    line,
                    msg: format!("{f:?} is not a finite number"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((line, vals));
    }
    Ok(rows)
}

const LUT_CSV_COLUMNS: [&str; 6] = ["aod", "h2o", "wavelength_nm", "rho_a", "s", "t"];

/// Imports a LUT from long-format CSV with columns
/// `aod,h2o,wavelength_nm,rho_a,s,t`, one row per grid knot and channel in
/// any order. Every combination must appear exactly once.
pub fn import_lut_csv(path: &Path) -> Result<AtmLookupTable> {
    let rows = numeric_rows(path, &LUT_CSV_COLUMNS)?;
    let unique = |k: usize| {
        let mut v: Vec<f64> = rows.iter().map(|(_, r)| r[k]).collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    let (aod, h2o, wl) = (unique(0), unique(1), unique(2));
    let (na, nh, n) = (aod.len(), h2o.len(), wl.len());
    let size = na * nh * n;
    if rows.len() != size {
        return Err(RetrievalError::Format(format!(
            "{}: {} rows for a {na}x{nh}x{n} grid",
            path.display(),
            rows.len()
        )));
    }
    let idx = |g: &[f64], x: f64| g.binary_search_by(|v| v.total_cmp(&x)).expect("value from grid");
    let mut cubes = vec![vec![f64::NAN; size]; 3];
    for (line, r) in &rows {
        let k = idx(&aod, r[0]) + na * (idx(&h2o, r[1]) + nh * idx(&wl, r[2]));
        if !cubes[0][k].is_nan() {
            return Err(RetrievalError::Parse {
                path: path.display().to_string(),
                line: *line,
                msg: "duplicate grid point".into(),
            });
        }
        for c in 0..3 {
            cubes[c][k] = r[3 + c];
        }
    }
    let t = cubes.pop().expect("3 cubes");
    let s = cubes.pop().expect("3 cubes");
    let rho_a = cubes.pop().expect("3 cubes");
    AtmLookupTable::new(aod, h2o, wl, rho_a, s, t)
}

pub fn export_lut_csv(path: &Path, lut: &AtmLookupTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(LUT_CSV_COLUMNS).map_err(|e| csv_error(path, e))?;
    for (c, wl) in lut.wavelengths().iter().enumerate() {
        for (j, h) in lut.h2o_grid().iter().enumerate() {
            for (i, a) in lut.aod_grid().iter().enumerate() {
                let (r, s, t) = lut.knot(i, j, c);
                w.write_record([a, h, wl, &r, &s, &t].map(|v| v.to_string()))
                    .map_err(|e| csv_error(path, e))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn pack_lower(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for j in 0..n {
        for i in j..n {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn unpack_lower(packed: &[f64], n: usize) -> Result<DMatrix<f64>> {
    if packed.len() != n * (n + 1) / 2 {
        return Err(RetrievalError::Dimension(format!(
            "{} packed values for a {n}x{n} matrix",
            packed.len()
        )));
    }
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        for i in j..n {
            m[(i, j)] = packed[k];
            m[(j, i)] = packed[k];
            k += 1;
        }
    }
    Ok(m)
}

pub fn write_components(path: &Path, wavelengths: &[f64], components: &[MixtureComponent]) -> Result<()> {
    let labels: Vec<&str> = components.iter().map(|c| c.label.as_str()).collect();
    let n = wavelengths.len();
    let mut f = ArrayFile::new("components", serde_json::json!({ "labels": labels }));
    f.insert("wavelengths", vec![n], wavelengths.to_vec())?;
    for c in components {
        if c.mean.len() != n {
            return Err(RetrievalError::Dimension(format!("component {} has {} channels", c.label, c.mean.len())));
        }
        f.insert(format!("mean/{}", c.label), vec![n], c.mean.clone())?;
        let packed = pack_lower(c.cov.matrix());
        f.insert(format!("cov_lower/{}", c.label), vec![packed.len()], packed)?;
    }
    f.write(path)
}

/// Returns the wavelengths and components of a component file.
pub fn read_components(path: &Path) -> Result<(Vec<f64>, Vec<MixtureComponent>)> {
    let f = ArrayFile::read(path)?;
    f.expect_kind("components")?;
    let labels: Vec<String> = serde_json::from_value(f.attrs.get("labels").cloned().unwrap_or(Value::Null))
        .map_err(|e| RetrievalError::Format(format!("{}: labels: {e}", path.display())))?;
    let wl = f.get("wavelengths")?.to_vec();
    let comps = labels
        .iter()
        .map(|l| {
            let cov = unpack_lower(f.get(&format!("cov_lower/{l}"))?, wl.len())?;
            MixtureComponent::new(l.clone(), f.get(&format!("mean/{l}"))?.to_vec(), SpdMatrix::new(cov)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((wl, comps))
}

/// Values on a wavelength grid with a retained-channel mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub wavelengths: Vec<f64>,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Spectrum {
    pub fn grid(&self) -> Result<WavelengthGrid> {
        WavelengthGrid::new(self.wavelengths.clone(), self.mask.clone())
    }
}

/// `<dir>/<stem>.mask.csv` for a spectrum at `<dir>/<stem>.csv`.
pub fn mask_path(spectrum: &Path) -> PathBuf {
    let stem = spectrum.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    spectrum.with_file_name(format!("{stem}.mask.csv"))
}

/// Reads a `wavelength_nm,value` CSV and its optional mask sidecar
/// (`wavelength_nm,retained` with 1 or 0). Without a sidecar every channel
/// is retained.
pub fn load_spectrum(path: &Path) -> Result<Spectrum> {
    let rows = numeric_rows(path, &["wavelength_nm", "value"])?;
    if rows.is_empty() {
        return Err(RetrievalError::Format(format!("{}: no data rows", path.display())));
    }
    for w in rows.windows(2) {
        if w[1].1[0] <= w[0].1[0] {
            return Err(RetrievalError::Parse {
                path: path.display().to_string(),
                line: w[1].0,
                msg: format!("wavelength {} does not increase", w[1].1[0]),
            });
        }
    }
    let wavelengths: Vec<f64> = rows.iter().map(|(_, r)| r[0]).collect();
    let values = rows.iter().map(|(_, r)| r[1]).collect();
    let mpath = mask_path(path);
    let mask = if mpath.exists() {
        let mrows = numeric_rows(&mpath, &["wavelength_nm", "retained"])?;
        if mrows.len() != wavelengths.len() {
            return Err(RetrievalError::Format(format!(
                "{}: {} rows, spectrum has {}",
                mpath.display(),
                mrows.len(),
                wavelengths.len()
            )));
        }
        mrows
            .iter()
            .zip(&wavelengths)
            .map(|((line, r), wl)| {
                let bad = |msg: String| RetrievalError::Parse {
                    path: mpath.display().to_string(),
                    line: *line,
                    msg,
                };
                if r[0] != *wl {
                    return Err(bad(format!("wavelength {} does not match spectrum ({wl})", r[0])));
                }
                match r[1] {
                    v if v == 1.0 => Ok(true),
                    v if v == 0.0 => Ok(false),
                    v => Err(bad(format!("mask value {v} is not 0 or 1"))),
                }
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![true; wavelengths.len()]
    };
    Ok(Spectrum {
        wavelengths,
        values,
        mask,
    })
}

/// Writes the spectrum and, if any channel is masked, the mask sidecar.
/// Values are written in shortest round-trip form, so reading back is lossless.
pub fn write_spectrum(path: &Path, spectrum: &Spectrum) -> Result<()> {
    let n = spectrum.wavelengths.len();
    if spectrum.values.len() != n || spectrum.mask.len() != n {
        return Err(RetrievalError::Dimension("spectrum columns differ in length".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["wavelength_nm", "value"]).map_err(|e| csv_error(path, e))?;
    for (wl, v) in spectrum.wavelengths.iter().zip(&spectrum.values) {
        w.write_record([wl.to_string(), v.to_string()]).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    let mpath = mask_path(path);
    if spectrum.mask.iter().all(|&m| m) {
        if mpath.exists() {
            std::fs::remove_file(&mpath)?;
        }
        return Ok(());
    }
    let mut w = csv::Writer::from_path(&mpath).map_err(|e| csv_error(&mpath, e))?;
    w.write_record(["wavelength_nm", "retained"]).map_err(|e| csv_error(&mpath, e))?;
    for (wl, m) in spectrum.wavelengths.iter().zip(&spectrum.mask) {
        w.write_record([wl.to_string(), (*m as u8).to_string()])
            .map_err(|e| csv_error(&mpath, e))?;
    }
    w.flush()?;
    Ok(())
}

/// JSON sidecar describing a chain binary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub n_samples: usize,
    pub n_params: usize,
    pub layout: String,
    pub seed: u64,
    pub config: McmcConfig,
    pub accept: AcceptCounts,
    pub atm_acceptance: f64,
    pub refl_acceptance: f64,
    pub overall_acceptance: f64,
    pub init: ChainInit,
    pub truncation_fallbacks: u64,
    /// Names of the binary files, relative to the sidecar.
    pub samples_file: String,
    pub log_posterior_file: String,
}

/// Writes `<stem>.bin` (row-major samples), `<stem>.logpost.bin` and the
/// `<stem>.json` sidecar into `dir`.
pub fn write_chain(dir: &Path, stem: &str, chain: &Chain) -> Result<PathBuf> {
    let samples_file = format!("{stem}.bin");
    let log_posterior_file = format!("{stem}.logpost.bin");
    let mut w = BufWriter::new(File::create(dir.join(&samples_file))?);
    write_f64s(&mut w, chain.samples())?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(dir.join(&log_posterior_file))?);
    write_f64s(&mut w, chain.log_posterior_trace())?;
    w.flush()?;
    let meta = ChainMeta {
        n_samples: chain.len(),
        n_params: chain.n_params(),
        layout: "row_major_f64_le".into(),
        seed: chain.config.seed,
        config: chain.config.clone(),
        accept: chain.accept,
        atm_acceptance: chain.accept.atm_rate(),
        refl_acceptance: chain.accept.refl_rate(),
        overall_acceptance: chain.accept.overall_rate(),
        init: chain.init.clone(),
        truncation_fallbacks: chain.truncation_fallbacks,
        samples_file,
        log_posterior_file,
    };
    let meta_path = dir.join(format!("{stem}.json"));
    write_json(&meta_path, &meta)?;
    Ok(meta_path)
}

/// Reads a chain from its JSON sidecar.
pub fn read_chain(meta_path: &Path) -> Result<Chain> {
    let meta: ChainMeta = read_json(meta_path)?;
    if meta.layout != "row_major_f64_le" {
        return Err(RetrievalError::Format(format!("unknown chain layout {:?}", meta.layout)));
    }
    let dir = meta_path.parent().unwrap_or(Path::new("."));
    let read_exact = |name: &str, n: usize| -> Result<Vec<f64>> {
        let p = dir.join(name);
        let len = std::fs::metadata(&p)?.len();
        if len != (n * 8) as u64 {
            return Err(RetrievalError::Format(format!("{}: {len} bytes, expected {}", p.display(), n * 8)));
        }
        Ok(read_f64s(&mut BufReader::new(File::open(&p)?), n)?)
    };
    let samples = read_exact(&meta.samples_file, meta.n_samples * meta.n_params)?;
    let lp = read_exact(&meta.log_posterior_file, meta.n_samples)?;
    let mut chain = Chain::from_parts(meta.n_params, samples, lp, meta.accept, meta.config, meta.init)?;
    chain.truncation_fallbacks = meta.truncation_fallbacks;
    Ok(chain)
}

fn chain_columns(wavelengths: &[f64]) -> Vec<String> {
    let mut cols: Vec<String> = wavelengths.iter().map(|w| format!("refl_{w}")).collect();
    cols.push("aod".into());
    cols.push("h2o".into());
    cols.push("log_posterior".into());
    cols
}

/// Exports samples as CSV: one column per reflectance channel
/// (`refl_<nm>`), then `aod`, `h2o`, `log_posterior`.
pub fn export_chain_csv(path: &Path, chain: &Chain, wavelengths: &[f64]) -> Result<()> {
    if wavelengths.len() != chain.n_channels() {
        return Err(RetrievalError::Dimension("wavelengths vs chain channels".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(chain_columns(wavelengths)).map_err(|e| csv_error(path, e))?;
    for (row, lp) in chain.rows().zip(chain.log_posterior_trace()) {
        let rec = row.iter().chain(std::iter::once(lp)).map(|v| v.to_string());
        w.write_record(rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Imports a CSV chain written by [`export_chain_csv`]; run metadata is
/// taken from `config` with zero acceptance counts.
pub fn import_chain_csv(path: &Path, config: McmcConfig) -> Result<(Vec<f64>, Chain)> {
    let mut rdr = csv_reader(path)?;
    let headers: Vec<String> = rdr.headers().map_err(|e| csv_error(path, e))?.iter().map(String::from).collect();
    let n_params = headers.len().saturating_sub(1);
    let wavelengths = headers
        .iter()
        .take(n_params.saturating_sub(2))
        .map(|h| h.strip_prefix("refl_").and_then(|w| w.parse::<f64>().ok()))
        .collect::<Option<Vec<_>>>();
    let wavelengths = match wavelengths {
        Some(w) if n_params >= 3 && headers == chain_columns(&w) => w,
        _ => {
            return Err(RetrievalError::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: "expected columns refl_<nm>..., aod, h2o, log_posterior".into(),
            })
        }
    };
    drop(rdr);
    let cols: Vec<&str> = headers.iter().map(String::as_str).collect();
    let rows = numeric_rows(path, &cols)?;
    let mut samples = Vec::with_capacity(rows.len() * n_params);
    let mut lp = Vec::with_capacity(rows.len());
    for (_, r) in rows {
        samples.extend_from_slice(&r[..n_params]);
        lp.push(r[n_params]);
    }
    let start = samples.get(..n_params).map(<[f64]>::to_vec).unwrap_or_default();
    let chain = Chain::from_parts(
        n_params,
        samples,
        lp,
        AcceptCounts::default(),
        config,
        ChainInit { start, projected: false },
    )?;
    Ok((wavelengths, chain))
}

/// JSON summary of an OE run; the Laplace covariance is stored separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OeSummary {
    pub x_map: StateVector,
    pub converged: bool,
    pub termination: Termination,
    pub iterations: usize,
    pub grad_norm: f64,
    pub outside_grid_queries: usize,
    pub cost_trace: Vec<f64>,
    pub surface_component: Option<String>,
    pub laplace_sd: Vec<f64>,
    pub covariance_file: String,
}

/// Writes `<stem>.json` and the covariance container `<stem>_cov.vsw`.
pub fn write_oe_result(dir: &Path, stem: &str, oe: &OeResult, surface_component: Option<&str>) -> Result<PathBuf> {
    let covariance_file = format!("{stem}_cov.vsw");
    let d = oe.gamma_laplace.dim();
    let mut f = ArrayFile::new("covariance", serde_json::json!({ "name": "gamma_laplace" }));
    f.insert("gamma_laplace", vec![d, d], oe.gamma_laplace.matrix().as_slice().to_vec())?;
    f.write(&dir.join(&covariance_file))?;
    let summary = OeSummary {
        x_map: oe.x_map.clone(),
        converged: oe.converged,
        termination: oe.termination,
        iterations: oe.iterations,
        grad_norm: oe.grad_norm,
        outside_grid_queries: oe.outside_grid_queries,
        cost_trace: oe.cost_trace.clone(),
        surface_component: surface_component.map(String::from),
        laplace_sd: oe.gamma_laplace.matrix().diagonal().iter().map(|v| v.sqrt()).collect(),
        covariance_file,
    };
    let path = dir.join(format!("{stem}.json"));
    write_json(&path, &summary)?;
    Ok(path)
}

pub fn read_oe_result(path: &Path) -> Result<(OeResult, Option<String>)> {
    let s: OeSummary = read_json(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let f = ArrayFile::read(&dir.join(&s.covariance_file))?;
    f.expect_kind("covariance")?;
    let d = s.x_map.dim();
    if f.shape("gamma_laplace") != Some(&[d, d][..]) {
        return Err(RetrievalError::Format(format!("covariance shape does not match {d} parameters")));
    }
    let gamma = SpdMatrix::new(DMatrix::from_column_slice(d, d, f.get("gamma_laplace")?))?;
    let oe = OeResult {
        x_map: s.x_map,
        gamma_laplace: gamma,
        cost_trace: s.cost_trace,
        converged: s.converged,
        termination: s.termination,
        iterations: s.iterations,
        grad_norm: s.grad_norm,
        outside_grid_queries: s.outside_grid_queries,
    };
    Ok((oe, s.surface_component))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path)?);
    serde_json::from_reader(r).map_err(|e| RetrievalError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })
}
