//! Stress–stretch experiments: ingest, validation, persistence and truncation.
//!
//! Experiment CSV layout (UTF-8, `#` comments ignored):
//!
//! ```text
//! # id: h16
//! # tendon_type: SDFT
//! stretch,stress_mpa,fidelity
//! 1.0,0.0,0.98
//! ```
//!
//! The first data column may be `strain` instead of `stretch`, in which case
//! it is converted with `λ = 1 + ε` (ε as a fraction, or percent when
//! [`StrainUnit::Percent`] is selected). `fidelity` is optional. The comment
//! lines `# id:`, `# tendon_type:` and `# truncation_index:` carry metadata.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The observation-noise value quoted for the tendon data set.
pub const REPORTED_NOISE_VALUE: f64 = 0.15;

/// Default truncation threshold on posterior fidelity means.
pub const DEFAULT_FIDELITY_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TendonType {
    #[serde(rename = "SDFT")]
    Sdft,
    #[serde(rename = "CDET")]
    Cdet,
}

impl fmt::Display for TendonType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TendonType::Sdft => "SDFT",
            TendonType::Cdet => "CDET",
        })
    }
}

impl FromStr for TendonType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "SDFT" => Ok(TendonType::Sdft),
            "CDET" => Ok(TendonType::Cdet),
            other => Err(Error::Data(format!("unknown tendon type {other:?}"))),
        }
    }
}

/// How the reported noise value 0.15 is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseConvention {
    /// 0.15 MPa² is a variance: `σ_obs = √0.15 ≈ 0.387` MPa.
    #[default]
    Variance,
    /// 0.15 MPa is the standard deviation itself.
    StdDev,
}

impl NoiseConvention {
    pub fn sigma_obs(self) -> f64 {
        match self {
            NoiseConvention::Variance => REPORTED_NOISE_VALUE.sqrt(),
            NoiseConvention::StdDev => REPORTED_NOISE_VALUE,
        }
    }
}

impl FromStr for NoiseConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variance" => Ok(NoiseConvention::Variance),
            "std-dev" | "sd" => Ok(NoiseConvention::StdDev),
            other => Err(Error::Config(format!("unknown noise convention {other:?}"))),
        }
    }
}

/// One tendon's tensile test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    id: String,
    tendon_type: TendonType,
    stretch: Vec<f64>,
    stress: Vec<f64>,
    fidelity: Option<Vec<f64>>,
    truncation_index: Option<usize>,
}

impl Experiment {
    pub fn new(
        id: impl Into<String>,
        tendon_type: TendonType,
        stretch: Vec<f64>,
        stress: Vec<f64>,
    ) -> Result<Self> {
        let e = Experiment {
            id: id.into(),
            tendon_type,
            stretch,
            stress,
            fidelity: None,
            truncation_index: None,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn with_fidelity(mut self, fidelity: Vec<f64>) -> Result<Self> {
        self.fidelity = Some(fidelity);
        self.validate()?;
        Ok(self)
    }

    pub fn with_truncation_index(mut self, index: Option<usize>) -> Self {
        self.truncation_index = index;
        self
    }

    fn validate(&self) -> Result<()> {
        let n = self.stretch.len();
        if n < 2 {
            return Err(Error::Data(format!(
                "experiment {}: need at least 2 observations, got {n}",
                self.id
            )));
        }
        if self.stress.len() != n {
            return Err(Error::Data(format!(
                "experiment {}: {} stretches but {} stresses",
                self.id,
                n,
                self.stress.len()
            )));
        }
        if let Some(i) = self.stretch.iter().position(|l| !l.is_finite() || *l < 1.0) {
            return Err(Error::Data(format!(
                "experiment {}: observation {i} has stretch {} (< 1 or non-finite)",
                self.id, self.stretch[i]
            )));
        }
        if let Some(i) = self.stretch.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Data(format!(
                "experiment {}: stretch not strictly increasing at observation {}",
                self.id,
                i + 1
            )));
        }
        if let Some(i) = self.stress.iter().position(|s| !s.is_finite()) {
            return Err(Error::Data(format!(
                "experiment {}: observation {i} has non-finite stress",
                self.id
            )));
        }
        if let Some(f) = &self.fidelity {
            if f.len() != n {
                return Err(Error::Data(format!(
                    "experiment {}: {} fidelity values for {n} observations",
                    self.id,
                    f.len()
                )));
            }
            if let Some(i) = f.iter().position(|g| !(*g > 0.0 && *g < 1.0)) {
                return Err(Error::Data(format!(
                    "experiment {}: fidelity {} at observation {i} outside (0, 1)",
                    self.id, f[i]
                )));
            }
        }
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn tendon_type(&self) -> TendonType {
        self.tendon_type
    }

    pub fn stretch(&self) -> &[f64] {
        &self.stretch
    }

    pub fn stress(&self) -> &[f64] {
        &self.stress
    }

    pub fn fidelity(&self) -> Option<&[f64]> {
        self.fidelity.as_deref()
    }

    pub fn truncation_index(&self) -> Option<usize> {
        self.truncation_index
    }

    pub fn len(&self) -> usize {
        self.stretch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stretch.is_empty()
    }

    /// Largest retained stretch.
    pub fn max_stretch(&self) -> f64 {
        *self.stretch.last().expect("validated non-empty")
    }

    /// Fidelity weights, or all ones when stage one has not run.
    pub fn weights(&self) -> Vec<f64> {
        self.fidelity
            .clone()
            .unwrap_or_else(|| vec![1.0; self.stretch.len()])
    }

    fn keep_prefix(&self, n: usize) -> Experiment {
        Experiment {
            id: self.id.clone(),
            tendon_type: self.tendon_type,
            stretch: self.stretch[..n].to_vec(),
            stress: self.stress[..n].to_vec(),
            fidelity: self.fidelity.as_ref().map(|f| f[..n].to_vec()),
            truncation_index: self.truncation_index,
        }
    }
}

/// Experiments of a single tendon type sharing one observation-noise scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    experiments: Vec<Experiment>,
    sigma_obs: f64,
}

impl Population {
    pub fn new(experiments: Vec<Experiment>, sigma_obs: f64) -> Result<Self> {
        let first = experiments
            .first()
            .ok_or_else(|| Error::Data("population has no experiments".into()))?;
        if let Some(e) = experiments
            .iter()
            .find(|e| e.tendon_type() != first.tendon_type())
        {
            return Err(Error::Data(format!(
                "mixed tendon types: {} is {} but {} is {}",
                first.id(),
                first.tendon_type(),
                e.id(),
                e.tendon_type()
            )));
        }
        if !(sigma_obs > 0.0 && sigma_obs.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_obs must be positive, got {sigma_obs}"
            )));
        }
        Ok(Population {
            experiments,
            sigma_obs,
        })
    }

    pub fn experiments(&self) -> &[Experiment] {
        &self.experiments
    }

    pub fn sigma_obs(&self) -> f64 {
        self.sigma_obs
    }

    pub fn tendon_type(&self) -> TendonType {
        self.experiments[0].tendon_type()
    }

    pub fn len(&self) -> usize {
        self.experiments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experiments.is_empty()
    }
}

/// Keep observations up to and including the first global stress maximum.
pub fn clip_to_max_stress(exp: &Experiment) -> Experiment {
    let (argmax, _) = exp
        .stress
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &s)| {
            if s > acc.1 {
                (i, s)
            } else {
                acc
            }
        });
    // Two observations are the minimum an Experiment can hold.
    exp.keep_prefix((argmax + 1).max(2))
}

/// Drop everything from the first observation whose fidelity mean falls
/// below `threshold`, and attach the surviving means as fidelity weights.
pub fn truncate(exp: &Experiment, fidelity_means: &[f64], threshold: f64) -> Result<Experiment> {
    if fidelity_means.len() != exp.len() {
        return Err(Error::Data(format!(
            "experiment {}: {} fidelity means for {} observations",
            exp.id(),
            fidelity_means.len(),
            exp.len()
        )));
    }
    let cut = fidelity_means
        .iter()
        .position(|&m| m < threshold)
        .unwrap_or(exp.len());
    if cut == 0 {
        return Err(Error::NoDataSurvives);
    }
    if cut < 2 {
        return Err(Error::Data(format!(
            "experiment {}: only {cut} observation survives selection",
            exp.id()
        )));
    }
    let mut out = exp.keep_prefix(cut);
    let means: Vec<f64> = fidelity_means[..cut]
        .iter()
        .map(|m| m.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
        .collect();
    out.fidelity = Some(means);
    if cut < exp.len() {
        out.truncation_index = Some(cut);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrainUnit {
    #[default]
    Fraction,
    Percent,
}

/// Options for [`load_experiment`].
#[derive(Debug, Clone, Default)]
pub struct FormatOptions {
    pub strain_unit: StrainUnit,
    /// Overrides the `# id:` metadata line (default: file stem).
    pub id: Option<String>,
    /// Overrides the `# tendon_type:` metadata line.
    pub tendon_type: Option<TendonType>,
}

fn parse_error(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

struct Metadata {
    id: Option<String>,
    tendon_type: Option<TendonType>,
    truncation_index: Option<usize>,
}

fn read_metadata(path: &Path, text: &str) -> Result<Metadata> {
    let mut meta = Metadata {
        id: None,
        tendon_type: None,
        truncation_index: None,
    };
    for (i, line) in text.lines().enumerate() {
        let Some(rest) = line.trim_start().strip_prefix('#') else {
            continue;
        };
        let Some((key, value)) = rest.split_once(':') else {
            continue;
        };
        let value = value.trim();
        match key.trim() {
            "id" => meta.id = Some(value.to_string()),
            "tendon_type" => {
                meta.tendon_type = Some(
                    value
                        .parse()
                        .map_err(|e: Error| parse_error(path, i as u64 + 1, e.to_string()))?,
                )
            }
            "truncation_index" => {
                meta.truncation_index = Some(value.parse().map_err(|_| {
                    parse_error(path, i as u64 + 1, format!("bad truncation index {value:?}"))
                })?)
            }
            _ => {}
        }
    }
    Ok(meta)
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Load and validate an experiment CSV.
pub fn load_experiment(path: impl AsRef<Path>, opts: &FormatOptions) -> Result<Experiment> {
    let path = path.as_ref();
    let text = read_text(path)?;
    parse_experiment(path, &text, opts)
}

/// Parse experiment CSV text; `path` is used for error messages and the default id.
pub fn parse_experiment(path: &Path, text: &str, opts: &FormatOptions) -> Result<Experiment> {
    let meta = read_metadata(path, text)?;
    let mut rdr = csv_reader(text);
    let headers = rdr
        .headers()
        .map_err(|e| parse_error(path, 1, e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (x_col, is_strain) = match (col("stretch"), col("strain")) {
        (Some(c), _) => (c, false),
        (None, Some(c)) => (c, true),
        (None, None) => {
            return Err(parse_error(
                path,
                1,
                "missing `stretch` or `strain` column",
            ))
        }
    };
    let y_col = col("stress_mpa").ok_or_else(|| parse_error(path, 1, "missing `stress_mpa` column"))?;
    let f_col = col("fidelity");

    let mut stretch = Vec::new();
    let mut stress = Vec::new();
    let mut fidelity = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |c: usize, what: &str| -> Result<f64> {
            let raw = rec
                .get(c)
                .ok_or_else(|| parse_error(path, line, format!("missing {what}")))?;
            raw.parse::<f64>()
                .map_err(|_| parse_error(path, line, format!("bad {what} {raw:?}")))
        };
        let x = field(x_col, "stretch/strain")?;
        let lambda = if is_strain {
            match opts.strain_unit {
                StrainUnit::Fraction => 1.0 + x,
                StrainUnit::Percent => 1.0 + x / 100.0,
            }
        } else {
            x
        };
        let y = field(y_col, "stress")?;
        if !y.is_finite() {
            return Err(parse_error(path, line, "non-finite stress"));
        }
        if !lambda.is_finite() || lambda < 1.0 {
            return Err(parse_error(path, line, format!("stretch {lambda} below 1")));
        }
        if let Some(&prev) = stretch.last() {
            if lambda == prev {
                return Err(parse_error(path, line, format!("duplicate stretch {lambda}")));
            }
            if lambda < prev {
                return Err(parse_error(
                    path,
                    line,
                    format!("stretch {lambda} decreases (previous {prev})"),
                ));
            }
        }
        stretch.push(lambda);
        stress.push(y);
        if let Some(c) = f_col {
            fidelity.push(field(c, "fidelity")?);
        }
    }
    let id = opts
        .id
        .clone()
        .or(meta.id)
        .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_default();
    let tendon_type = opts.tendon_type.or(meta.tendon_type).ok_or_else(|| {
        parse_error(path, 1, "tendon type unknown: add `# tendon_type:` or pass it explicitly")
    })?;
    let mut exp = Experiment::new(id, tendon_type, stretch, stress)?;
    if f_col.is_some() {
        exp = exp.with_fidelity(fidelity)?;
    }
    Ok(exp.with_truncation_index(meta.truncation_index))
}

/// Pull two named columns out of an arbitrary delimited file.
///
/// The layout of the published raw tendon archive is not documented, so this
/// is the converter boundary: callers name the strain and stress columns.
pub fn load_raw_columns(
    path: impl AsRef<Path>,
    strain_column: &str,
    stress_column: &str,
    delimiter: u8,
    opts: &FormatOptions,
) -> Result<Experiment> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| parse_error(path, 1, e.to_string()))?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_error(path, 1, format!("missing column {name:?}")))
    };
    let (xc, yc) = (find(strain_column)?, find(stress_column)?);
    let mut out = String::from("strain,stress_mpa\n");
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_error(path, 0, e.to_string()))?;
        out.push_str(&format!(
            "{},{}\n",
            rec.get(xc).unwrap_or(""),
            rec.get(yc).unwrap_or("")
        ));
    }
    parse_experiment(path, &out, opts)
}

/// Create `path` for writing; refuses to clobber an existing file unless `force`.
pub fn create_file(path: &Path, force: bool) -> Result<fs::File> {
    if path.exists() && !force {
        return Err(Error::Exists(path.to_path_buf()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

/// Write text atomically enough for batch use (create, write, flush).
pub fn write_text(path: &Path, text: &str, force: bool) -> Result<()> {
    let mut f = create_file(path, force)?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T, force: bool) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    write_text(path, &(text + "\n"), force)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Save an experiment in the canonical CSV layout; lossless under [`load_experiment`].
pub fn save_experiment(path: impl AsRef<Path>, exp: &Experiment, force: bool) -> Result<()> {
    let path = path.as_ref();
    let mut s = format!("# id: {}\n# tendon_type: {}\n", exp.id, exp.tendon_type);
    if let Some(t) = exp.truncation_index {
        s.push_str(&format!("# truncation_index: {t}\n"));
    }
    match &exp.fidelity {
        Some(f) => {
            s.push_str("stretch,stress_mpa,fidelity\n");
            for i in 0..exp.len() {
                s.push_str(&format!("{},{},{}\n", exp.stretch[i], exp.stress[i], f[i]));
            }
        }
        None => {
            s.push_str("stretch,stress_mpa\n");
            for i in 0..exp.len() {
                s.push_str(&format!("{},{}\n", exp.stretch[i], exp.stress[i]));
            }
        }
    }
    write_text(path, &s, force)
}

/// Per-chain sidecar written next to every chain CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMetadata {
    pub seed: u64,
    pub chain_index: usize,
    pub columns: Vec<String>,
    pub acceptance_rate: Vec<f64>,
    pub divergences: usize,
    pub adaptation: serde_json::Value,
    pub config: serde_json::Value,
}

/// Chain draws with named columns, as persisted on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTable {
    pub columns: Vec<String>,
    pub draws: Vec<Vec<f64>>,
}

pub fn sidecar_path(chain_csv: &Path) -> PathBuf {
    chain_csv.with_extension("json")
}

/// Write `draw,<columns...>` rows plus a JSON sidecar at `<path>.json`.
pub fn save_chain(
    path: impl AsRef<Path>,
    table: &ChainTable,
    meta: &ChainMetadata,
    force: bool,
) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::with_capacity(table.draws.len() * table.columns.len() * 20);
    s.push_str("draw");
    for c in &table.columns {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    for (i, row) in table.draws.iter().enumerate() {
        if row.len() != table.columns.len() {
            return Err(Error::Data(format!(
                "draw {i} has {} values for {} columns",
                row.len(),
                table.columns.len()
            )));
        }
        s.push_str(&i.to_string());
        for v in row {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s.push('\n');
    }
    write_text(path, &s, force)?;
    write_json(&sidecar_path(path), meta, force)
}

pub fn load_chain(path: impl AsRef<Path>) -> Result<ChainTable> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut rdr = csv_reader(&text);
    let headers = rdr
        .headers()
        .map_err(|e| parse_error(path, 1, e.to_string()))?
        .clone();
    if headers.get(0) != Some("draw") {
        return Err(parse_error(path, 1, "first column must be `draw`"));
    }
    let columns: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut draws = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_error(path, 0, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let row = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| parse_error(path, line, format!("bad value {v:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != columns.len() {
            return Err(parse_error(path, line, "wrong number of columns"));
        }
        draws.push(row);
    }
    Ok(ChainTable { columns, draws })
}

/// `index,stretch,fidelity_mean` table produced by selection.
pub fn save_fidelity_means(
    path: impl AsRef<Path>,
    stretch: &[f64],
    means: &[f64],
    force: bool,
) -> Result<()> {
    let mut s = String::from("index,stretch,fidelity_mean\n");
    for (i, (l, m)) in stretch.iter().zip(means).enumerate() {
        s.push_str(&format!("{i},{l},{m}\n"));
    }
    write_text(path.as_ref(), &s, force)
}

pub fn load_fidelity_means(path: impl AsRef<Path>) -> Result<(Vec<f64>, Vec<f64>)> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut rdr = csv_reader(&text);
    let mut stretch = Vec::new();
    let mut means = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_error(path, 0, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let get = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| parse_error(path, line, "expected index,stretch,fidelity_mean"))
        };
        stretch.push(get(1)?);
        means.push(get(2)?);
    }
    Ok((stretch, means))
}
