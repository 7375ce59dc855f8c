//! Grid and law files, plus the loss-to-BPC conversion.
//!
//! Grid files are CSV with the header `n,d,loss`. Law files are TOML:
//!
//! ```toml
//! version = 1
//! family = "chinchilla"
//!
//! [params]
//! A = 406.4
//! alpha = 0.34
//! # ...
//!
//! [provenance]
//! method = "nonlinear"
//! grid_digest = "sha256:…"
//! tool_version = "0.1.0"
//! warnings = []
//!
//! [provenance.config]
//! starts = 256
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::Annotation;
use crate::error::{Error, Result};
use crate::model::{Family, Law, LossGrid, LossPoint, DEFAULT_LAMBDA};
use crate::nonlinear::{MultiStartConfig, ObjectiveSpace};
use crate::piecewise::PiecewiseConfig;
use crate::report::FitMethod;

pub const GRID_HEADER: [&str; 3] = ["n", "d", "loss"];
pub const LAW_FILE_VERSION: i64 = 1;
pub const ANNOTATION_HEADER: [&str; 3] = ["label", "n", "d"];

pub fn load_grid(path: impl AsRef<Path>) -> Result<LossGrid> {
    load_grid_with_lambda(path, DEFAULT_LAMBDA)
}

pub fn load_grid_with_lambda(path: impl AsRef<Path>, lambda: f64) -> Result<LossGrid> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_grid(&text, lambda)
}

/// Parses grid CSV text. Errors carry 1-based line and column numbers.
pub fn parse_grid(text: &str, lambda: f64) -> Result<LossGrid> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(csv_error)?.clone();
    if header.iter().collect::<Vec<_>>() != GRID_HEADER {
        return Err(Error::Parse {
            line: 1,
            column: 1,
            message: format!(
                "expected header 'n,d,loss', found '{}'",
                header.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut points = Vec::new();
    let mut seen: HashMap<(u64, u64), u64> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        let mut values = [0.0; 3];
        for (col, slot) in values.iter_mut().enumerate() {
            let field = record.get(col).unwrap_or_default();
            *slot = field.parse::<f64>().map_err(|e| Error::Parse {
                line,
                column: col as u64 + 1,
                message: format!("'{field}' is not a number for {}: {e}", GRID_HEADER[col]),
            })?;
        }
        let [n, d, loss] = values;
        let point = LossPoint::new(n, d, loss).map_err(|e| Error::InvalidRow {
            line,
            message: e.to_string(),
        })?;
        if let Some(first) = seen.insert((n.to_bits(), d.to_bits()), line) {
            return Err(Error::InvalidRow {
                line,
                message: format!("duplicate (n, d) = ({n}, {d}), first seen on line {first}"),
            });
        }
        points.push(point);
    }
    LossGrid::new(points, lambda)
}

/// Parses `label,n,d` CSV text describing reference training configurations.
pub fn parse_annotations(text: &str) -> Result<Vec<Annotation>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(csv_error)?.clone();
    if header.iter().collect::<Vec<_>>() != ANNOTATION_HEADER {
        return Err(Error::Parse {
            line: 1,
            column: 1,
            message: format!(
                "expected header 'label,n,d', found '{}'",
                header.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line());
        let mut values = [0.0; 2];
        for (i, slot) in values.iter_mut().enumerate() {
            let field = record.get(i + 1).unwrap_or_default();
            *slot = field.parse::<f64>().map_err(|e| Error::Parse {
                line,
                column: i as u64 + 2,
                message: format!("'{field}' is not a number for {}: {e}", ANNOTATION_HEADER[i + 1]),
            })?;
        }
        let [n, d] = values;
        if !(n > 0.0 && d > 0.0 && n.is_finite() && d.is_finite()) {
            return Err(Error::InvalidRow {
                line,
                message: format!("n and d must be finite and positive, got ({n}, {d})"),
            });
        }
        out.push(Annotation {
            label: record.get(0).unwrap_or_default().to_string(),
            n,
            d,
        });
    }
    Ok(out)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_annotations(&text)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        line,
        column: 1,
        message: e.to_string(),
    }
}

/// CSV text for a grid; floats use the shortest representation that reads back exactly.
pub fn format_grid(grid: &LossGrid) -> String {
    let mut out = String::from("n,d,loss\n");
    for p in grid.points() {
        let _ = writeln!(out, "{},{},{}", p.n, p.d, p.loss);
    }
    out
}

pub fn write_grid(grid: &LossGrid, path: impl AsRef<Path>) -> Result<()> {
    write_text(path, &format_grid(grid))
}

/// `sha256:<hex>` over the canonical CSV text of the grid.
pub fn grid_digest(grid: &LossGrid) -> String {
    let hash = Sha256::digest(format_grid(grid).as_bytes());
    let mut hex = String::with_capacity(7 + 64);
    hex.push_str("sha256:");
    for b in hash.iter() {
        let _ = write!(hex, "{b:02x}");
    }
    hex
}

fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Where a law came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: FitMethod,
    pub grid_digest: String,
    pub tool_version: String,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub config: toml::Table,
}

impl Provenance {
    fn base(method: FitMethod, grid: &LossGrid, warnings: Vec<String>, config: toml::Table) -> Self {
        Self {
            method,
            grid_digest: grid_digest(grid),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            warnings,
            config,
        }
    }

    pub fn piecewise(grid: &LossGrid, cfg: &PiecewiseConfig, warnings: Vec<String>) -> Self {
        let mut config = toml::Table::new();
        config.insert("lambda".into(), grid.lambda().into());
        config.insert("pairing_tolerance".into(), cfg.pairing_tolerance.into());
        config.insert("max_iterations".into(), (cfg.max_iterations as i64).into());
        config.insert("tolerance".into(), cfg.tolerance.into());
        config.insert(
            "power_grid_points".into(),
            (cfg.power_grid.coarse_points().len() as i64).into(),
        );
        Self::base(FitMethod::Piecewise, grid, warnings, config)
    }

    pub fn nonlinear(grid: &LossGrid, cfg: &MultiStartConfig, warnings: Vec<String>) -> Self {
        let mut config = toml::Table::new();
        config.insert("starts".into(), (cfg.starts as i64).into());
        // TOML integers are signed 64-bit
        config.insert("seed".into(), cfg.seed.to_string().into());
        config.insert("max_steps".into(), (cfg.max_steps as i64).into());
        config.insert("step_tolerance".into(), cfg.step_tolerance.into());
        let objective = match cfg.objective {
            ObjectiveSpace::Squared => "squared",
            ObjectiveSpace::SquaredLog => "squared_log",
        };
        config.insert("objective".into(), objective.into());
        Self::base(FitMethod::Nonlinear, grid, warnings, config)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LawFile {
    pub law: Law,
    pub provenance: Option<Provenance>,
}

#[derive(Serialize, Deserialize)]
struct RawLawFile {
    version: Option<i64>,
    family: String,
    params: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

impl LawFile {
    pub fn new(law: Law) -> Self {
        Self { law, provenance: None }
    }

    pub fn with_provenance(law: Law, provenance: Provenance) -> Self {
        Self {
            law,
            provenance: Some(provenance),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        let family = law_family(&self.law);
        let params = family
            .parameter_names()
            .iter()
            .map(|s| s.to_string())
            .zip(self.law.parameters())
            .collect();
        let raw = RawLawFile {
            version: Some(LAW_FILE_VERSION),
            family: family.as_str().to_string(),
            params,
            provenance: self.provenance.clone(),
        };
        toml::to_string(&raw).map_err(|e| Error::LawFile(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawLawFile = toml::from_str(text).map_err(|e| Error::LawFile(e.to_string()))?;
        match raw.version {
            None => return Err(Error::LawFile("missing version field".into())),
            Some(LAW_FILE_VERSION) => {}
            Some(v) => return Err(Error::LawFile(format!("unsupported version {v}"))),
        }
        let family: Family = raw.family.parse().map_err(|e: Error| Error::LawFile(e.to_string()))?;
        let names = family.parameter_names();
        if raw.params.len() != names.len() {
            return Err(Error::LawFile(format!(
                "{family} law has {} parameters, file lists {}",
                names.len(),
                raw.params.len()
            )));
        }
        let values = names
            .iter()
            .map(|name| {
                raw.params
                    .get(*name)
                    .copied()
                    .ok_or_else(|| Error::LawFile(format!("missing parameter '{name}'")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let law = Law::from_parameters(family, &values).map_err(|e| Error::LawFile(e.to_string()))?;
        Ok(Self {
            law,
            provenance: raw.provenance,
        })
    }
}

fn law_family(law: &Law) -> Family {
    match law {
        Law::Farseer(_) => Family::Farseer,
        Law::Chinchilla(_) => Family::Chinchilla,
    }
}

pub fn save_law(file: &LawFile, path: impl AsRef<Path>) -> Result<()> {
    write_text(path, &file.to_toml()?)
}

pub fn load_law(path: impl AsRef<Path>) -> Result<LawFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    LawFile::from_toml(&text)
}

/// Bits per character from a per-token loss in nats.
pub fn bpc_from_loss(loss_per_token: f64, tokens: f64, chars: f64) -> Result<f64> {
    bpc_from_loss_in_base(loss_per_token, tokens, chars, std::f64::consts::E)
}

/// Bits per character from a per-token loss measured with logarithms of `base`.
pub fn bpc_from_loss_in_base(loss_per_token: f64, tokens: f64, chars: f64, base: f64) -> Result<f64> {
    if !loss_per_token.is_finite() {
        return Err(Error::InvalidInput(format!(
            "loss must be finite, got {loss_per_token}"
        )));
    }
    if !(tokens > 0.0 && chars > 0.0 && tokens.is_finite() && chars.is_finite()) {
        return Err(Error::InvalidInput(
            "token and character counts must be positive".into(),
        ));
    }
    if !(base > 0.0 && base != 1.0 && base.is_finite()) {
        return Err(Error::InvalidInput(format!("invalid logarithm base {base}")));
    }
    Ok(loss_per_token * base.log2() * tokens / chars)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChinchillaParams, FarseerParams};
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    #[test]
    fn annotations_parse_and_reject_bad_rows() {
        let rows = parse_annotations("label,n,d\nmodel a, 7e10, 2e12\nb,1e9,1e11\n").unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].label, "model a");
        assert_eq!((rows[1].n, rows[1].d), (1e9, 1e11));
        assert!(matches!(
            parse_annotations("label,n,d\nx,1e9,-1\n"),
            Err(Error::InvalidRow { line: 2, .. })
        ));
        assert!(matches!(
            parse_annotations("name,n,d\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn three_rows() {
        let g = parse_grid("n,d,loss\n1e8,1e9,3.2\n1e8,2e9,3.1\n2e8,1e9,3.0\n", DEFAULT_LAMBDA).unwrap();
        assert_eq!(g.len(), 3);
    }

    #[test]
    fn crlf_and_spaces() {
        let g = parse_grid("n,d,loss\r\n1e8, 1e9 ,3.2\r\n2e8,1e9,3.0\r\n", DEFAULT_LAMBDA).unwrap();
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn duplicate_rows_name_both_lines() {
        let err = parse_grid(
            "n,d,loss\n1e8,1e9,3.2\n2e8,1e9,3.0\n100000000,1e9,3.3\n",
            DEFAULT_LAMBDA,
        )
        .unwrap_err();
        match err {
            Error::InvalidRow { line, message } => {
                assert_eq!(line, 4);
                assert!(message.contains("line 2"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_positive_loss_is_rejected() {
        let err = parse_grid("n,d,loss\n1e8,1e9,3.2\n1e8,2e9,0\n", DEFAULT_LAMBDA).unwrap_err();
        assert!(matches!(err, Error::InvalidRow { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn malformed_number_reports_column() {
        let err = parse_grid("n,d,loss\n1e8,abc,3.2\n", DEFAULT_LAMBDA).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, column: 2, .. }), "{err:?}");
        let err = parse_grid("n,d,loss\n1e8,1e9\n", DEFAULT_LAMBDA).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn header_is_mandatory() {
        let err = parse_grid("1e8,1e9,3.2\n", DEFAULT_LAMBDA).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn bpc_conversion() {
        assert_eq!(bpc_from_loss(LN_2, 7.0, 7.0).unwrap(), 1.0);
        assert_eq!(bpc_from_loss(LN_2, 1.0, 4.0).unwrap(), 0.25);
        assert!((bpc_from_loss(1.0, 3.0, 10.0).unwrap() - 0.432808512266689).abs() < 1e-14);
        assert_eq!(bpc_from_loss_in_base(1.5, 2.0, 3.0, 2.0).unwrap(), 1.0);
        assert!(bpc_from_loss(1.0, 0.0, 1.0).is_err());
        assert!(bpc_from_loss(f64::NAN, 1.0, 1.0).is_err());
    }

    #[test]
    fn law_file_requires_version_and_matching_parameters() {
        let text = LawFile::new(Law::Farseer(FarseerParams::reference()))
            .to_toml()
            .unwrap();
        assert!(text.contains("version = 1"));
        let unversioned = text.replace("version = 1\n", "");
        assert!(matches!(LawFile::from_toml(&unversioned), Err(Error::LawFile(_))));
        let relabelled = text.replace("family = \"farseer\"", "family = \"chinchilla\"");
        assert!(matches!(LawFile::from_toml(&relabelled), Err(Error::LawFile(_))));
    }

    #[test]
    fn provenance_round_trips() {
        let mut config = toml::Table::new();
        config.insert("starts".into(), toml::Value::Integer(256));
        let file = LawFile::with_provenance(
            Law::Chinchilla(ChinchillaParams {
                a: 406.4,
                alpha: 0.34,
                b: 410.7,
                beta: 0.28,
                e: 1.69,
            }),
            Provenance {
                method: FitMethod::Nonlinear,
                grid_digest: "sha256:00".into(),
                tool_version: "0.1.0".into(),
                warnings: vec!["something".into()],
                config,
            },
        );
        assert_eq!(LawFile::from_toml(&file.to_toml().unwrap()).unwrap(), file);
    }

    #[test]
    fn provenance_builders_record_settings() {
        let grid = parse_grid("n,d,loss\n1e8,1e9,3.2\n", DEFAULT_LAMBDA).unwrap();
        let p = Provenance::nonlinear(&grid, &MultiStartConfig::default().with_seed(u64::MAX), vec![]);
        assert_eq!(p.config["starts"].as_integer(), Some(256));
        assert_eq!(p.config["seed"].as_str(), Some("18446744073709551615"));
        let p = Provenance::piecewise(&grid, &PiecewiseConfig::default(), vec![]);
        assert_eq!(p.method, FitMethod::Piecewise);
        assert_eq!(p.grid_digest, grid_digest(&grid));
        let file = LawFile::with_provenance(Law::Farseer(FarseerParams::reference()), p);
        assert_eq!(LawFile::from_toml(&file.to_toml().unwrap()).unwrap(), file);
    }

    #[test]
    fn digest_depends_on_content() {
        let a = parse_grid("n,d,loss\n1e8,1e9,3.2\n", DEFAULT_LAMBDA).unwrap();
        let b = parse_grid("n,d,loss\n1e8,1e9,3.20000001\n", DEFAULT_LAMBDA).unwrap();
        assert_eq!(grid_digest(&a), grid_digest(&a.clone()));
        assert_ne!(grid_digest(&a), grid_digest(&b));
        assert_eq!(grid_digest(&a).len(), 7 + 64);
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![-1e3f64..1e3, any::<f64>().prop_filter("finite", |v| v.is_finite())]
    }

    fn nonzero() -> impl Strategy<Value = f64> {
        finite().prop_filter("nonzero", |v| *v != 0.0)
    }

    proptest! {
        #[test]
        fn farseer_law_round_trips_bitwise(
            a1 in finite(), b1 in finite(), alpha in nonzero(),
            a2 in finite(), b2 in finite(), beta in nonzero(),
            a3 in finite(), b3 in finite(), gamma in nonzero(),
        ) {
            let law = Law::Farseer(FarseerParams { a1, b1, alpha, a2, b2, beta, a3, b3, gamma });
            let back = LawFile::from_toml(&LawFile::new(law).to_toml().unwrap()).unwrap().law;
            let bits = |l: &Law| l.parameters().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back), bits(&law));
        }

        #[test]
        fn grid_text_is_a_fixed_point(
            rows in proptest::collection::btree_map((1u32..1000, 1u32..1000), 1e-3f64..10.0, 1..30)
        ) {
            let points: Vec<LossPoint> = rows
                .iter()
                .map(|(&(i, j), &loss)| LossPoint::new(i as f64 * 1.37e7, j as f64 * 3.1e8, loss).unwrap())
                .collect();
            let grid = LossGrid::new(points, DEFAULT_LAMBDA).unwrap();
            let text = format_grid(&grid);
            let parsed = parse_grid(&text, DEFAULT_LAMBDA).unwrap();
            prop_assert_eq!(&parsed, &grid);
            prop_assert_eq!(format_grid(&parsed), text);
        }
    }
}
