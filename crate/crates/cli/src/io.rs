//! Files read and written by the commands.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use frk_core::geometry::{build_bau_grid, BauGrid, Rect, Support};
use frk_core::simulate::Simulation;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, Context};

/// Writes through a temporary file in the target directory, then renames.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

/// BAU grid description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BauSpec {
    /// `[xmin, ymin, xmax, ymax]`
    pub bbox: [f64; 4],
    pub nx: usize,
    pub ny: usize,
    #[serde(default = "one")]
    pub n_times: usize,
    /// Size parameter shared by every BAU.
    pub size: Option<f64>,
}

fn one() -> usize {
    1
}

impl BauSpec {
    pub fn from_grid(grid: &BauGrid) -> Self {
        let b = grid.bbox();
        let size = grid.size_params().and_then(|k| k.first().copied());
        BauSpec { bbox: [b.xmin, b.ymin, b.xmax, b.ymax], nx: grid.nx(), ny: grid.ny(), n_times: grid.n_time(), size }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn build(&self, linear_trend: bool, path: &Path) -> CliResult<BauGrid> {
        let ctx = |key: &str| format!("{}: {key}", path.display());
        let [x0, y0, x1, y1] = self.bbox;
        let bbox = Rect::new(x0, y0, x1, y1).context(ctx("bbox"))?;
        let mut grid = build_bau_grid(bbox, self.nx, self.ny, self.n_times).context(ctx("nx/ny/n_times"))?;
        if linear_trend {
            grid.use_linear_trend();
        }
        if let Some(k) = self.size {
            grid.set_size_params(vec![k; grid.len()]).context(ctx("size"))?;
        }
        Ok(grid)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("BAU spec serialises")
    }
}

fn csv_reader(bytes: &[u8]) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes)
}

struct Columns {
    index: HashMap<String, usize>,
}

impl Columns {
    fn new(headers: &csv::StringRecord) -> Self {
        Columns { index: headers.iter().enumerate().map(|(i, h)| (h.to_string(), i)).collect() }
    }

    fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Parsed value, `None` when the column is absent or the field empty.
    fn get(&self, rec: &csv::StringRecord, name: &str, at: &str) -> CliResult<Option<f64>> {
        let Some(&i) = self.index.get(name) else { return Ok(None) };
        match rec.get(i).unwrap_or("") {
            "" => Ok(None),
            s => s
                .parse::<f64>()
                .map(Some)
                .map_err(|_| CliError::Config(format!("{at}: column `{name}` has non-numeric value `{s}`"))),
        }
    }

    fn text<'r>(&self, rec: &'r csv::StringRecord, name: &str) -> Option<&'r str> {
        self.index.get(name).and_then(|&i| rec.get(i))
    }
}

fn line_of(path: &Path, rec: &csv::StringRecord) -> String {
    let line = rec.position().map(|p| p.line()).unwrap_or(0);
    format!("{} line {line}", path.display())
}

/// Rows of a data or region file.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportTable {
    pub ids: Vec<String>,
    pub supports: Vec<Support>,
    pub values: Option<Vec<f64>>,
    /// Location of each row, for error messages.
    pub lines: Vec<String>,
}

/// Reads supports given as points (`x`, `y`) or rectangles
/// (`xmin`, `ymin`, `xmax`, `ymax`), with optional `t` and `id` columns.
/// `value_column` is required when given.
pub fn read_supports(path: &Path, value_column: Option<&str>) -> CliResult<SupportTable> {
    let bytes = read_file(path)?;
    let mut rdr = csv_reader(&bytes);
    let headers = rdr.headers().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?.clone();
    let cols = Columns::new(&headers);
    let has_point = cols.has("x") && cols.has("y");
    let has_rect = ["xmin", "ymin", "xmax", "ymax"].iter().all(|c| cols.has(c));
    if !has_point && !has_rect {
        return Err(CliError::Config(format!(
            "{} line 1: need columns x,y or xmin,ymin,xmax,ymax",
            path.display()
        )));
    }
    if let Some(v) = value_column {
        if !cols.has(v) {
            return Err(CliError::Config(format!("{} line 1: missing column `{v}`", path.display())));
        }
    }
    let mut table = SupportTable { ids: vec![], supports: vec![], values: value_column.map(|_| vec![]), lines: vec![] };
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let at = line_of(path, &rec);
        let point = match (cols.get(&rec, "x", &at)?, cols.get(&rec, "y", &at)?) {
            (Some(x), Some(y)) => Some(Support::point(x, y)),
            _ => None,
        };
        let support = match point {
            Some(s) => s,
            None => {
                let vals: Vec<Option<f64>> = ["xmin", "ymin", "xmax", "ymax"]
                    .iter()
                    .map(|c| cols.get(&rec, c, &at))
                    .collect::<CliResult<_>>()?;
                match vals[..] {
                    [Some(a), Some(b), Some(c), Some(d)] => Support::rect(Rect::new(a, b, c, d).context(&at)?),
                    _ => return Err(CliError::Config(format!("{at}: row has neither a point nor a rectangle"))),
                }
            }
        };
        let support = match cols.get(&rec, "t", &at)? {
            Some(t) if t >= 0.0 && t.fract() == 0.0 => support.at_time(t as usize),
            Some(t) => return Err(CliError::Config(format!("{at}: time index {t} is not a non-negative integer"))),
            None => support,
        };
        if let (Some(name), Some(values)) = (value_column, table.values.as_mut()) {
            match cols.get(&rec, name, &at)? {
                Some(v) => values.push(v),
                None => return Err(CliError::Config(format!("{at}: empty `{name}`"))),
            }
        }
        let id = cols.text(&rec, "id").map(str::to_string).unwrap_or_else(|| table.supports.len().to_string());
        table.ids.push(id);
        table.supports.push(support);
        table.lines.push(at);
    }
    Ok(table)
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Vec<u8> {
    w.into_inner().expect("in-memory CSV writer")
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Data rows of a simulation, in the format [`read_supports`] accepts.
pub fn data_csv(sim: &Simulation) -> Vec<u8> {
    use frk_core::geometry::Footprint;
    let spacetime = sim.grid.n_time() > 1;
    let points = sim.supports.iter().all(|s| matches!(s.footprint, Footprint::Point { .. }));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = vec!["id"];
    header.extend(if points { &["x", "y"][..] } else { &["xmin", "ymin", "xmax", "ymax"][..] });
    if spacetime {
        header.push("t");
    }
    header.push("z");
    w.write_record(&header).expect("write header");
    for (j, (s, z)) in sim.supports.iter().zip(&sim.z).enumerate() {
        let mut row = vec![j.to_string()];
        match &s.footprint {
            Footprint::Point { x, y } => row.extend([fmt(*x), fmt(*y)]),
            Footprint::Rect(r) => row.extend([fmt(r.xmin), fmt(r.ymin), fmt(r.xmax), fmt(r.ymax)]),
            Footprint::Baus(_) => unreachable!("simulated supports are points or rectangles"),
        }
        if spacetime {
            row.push(s.time.unwrap_or(0).to_string());
        }
        row.push(fmt(*z));
        w.write_record(&row).expect("write row");
    }
    finish_csv(w)
}

/// Per-BAU truth with an `observed` flag.
pub fn truth_csv(sim: &Simulation) -> Vec<u8> {
    let g = &sim.grid;
    let spacetime = g.n_time() > 1;
    let t = &sim.truth;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id", "x", "y"];
    if spacetime {
        header.push("t");
    }
    header.extend(["Y", "mu"]);
    if t.prob.is_some() {
        header.push("prob");
    }
    if t.size.is_some() {
        header.push("k");
    }
    header.push("observed");
    w.write_record(&header).expect("write header");
    for i in 0..g.len() {
        let c = g.centroid(i);
        let mut row = vec![i.to_string(), fmt(c[0]), fmt(c[1])];
        if spacetime {
            row.push(g.time_index(i).to_string());
        }
        row.extend([fmt(t.latent[i]), fmt(t.mean[i])]);
        if let Some(p) = &t.prob {
            row.push(fmt(p[i]));
        }
        if let Some(k) = &t.size {
            row.push(fmt(k[i]));
        }
        row.push(u8::from(t.observed[i]).to_string());
        w.write_record(&row).expect("write row");
    }
    finish_csv(w)
}

/// Truth rows keyed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRow {
    pub value: f64,
    pub observed: bool,
    pub time: Option<usize>,
}

pub fn read_truth(path: &Path, column: &str) -> CliResult<HashMap<String, TruthRow>> {
    let bytes = read_file(path)?;
    let mut rdr = csv_reader(&bytes);
    let headers = rdr.headers().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?.clone();
    let cols = Columns::new(&headers);
    for c in ["id", column] {
        if !cols.has(c) {
            return Err(CliError::Config(format!("{} line 1: missing column `{c}`", path.display())));
        }
    }
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let at = line_of(path, &rec);
        let id = cols.text(&rec, "id").unwrap_or("").to_string();
        let value = cols.get(&rec, column, &at)?.ok_or_else(|| CliError::Config(format!("{at}: empty `{column}`")))?;
        let observed = cols.get(&rec, "observed", &at)?.is_some_and(|v| v != 0.0);
        let time = cols.get(&rec, "t", &at)?.map(|t| t as usize);
        if out.insert(id.clone(), TruthRow { value, observed, time }).is_some() {
            return Err(CliError::Config(format!("{at}: duplicate id `{id}`")));
        }
    }
    Ok(out)
}

/// Ids of a predictions file, in row order.
pub fn read_prediction_ids(path: &Path) -> CliResult<Vec<String>> {
    let bytes = read_file(path)?;
    let mut rdr = csv_reader(&bytes);
    let headers = rdr.headers().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?.clone();
    let cols = Columns::new(&headers);
    if !cols.has("id") {
        return Err(CliError::Config(format!("{} line 1: missing column `id`", path.display())));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            Ok(cols.text(&rec, "id").unwrap_or("").to_string())
        })
        .collect()
}

pub const SAMPLE_MAGIC: &[u8; 8] = b"MCSAMP01";

/// Sample matrix dump: magic, `u32` rows, `u32` columns (little endian),
/// then the entries as `f64` in column-major order.
pub fn encode_samples(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * m.len());
    out.extend_from_slice(SAMPLE_MAGIC);
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_samples(bytes: &[u8], path: &Path) -> CliResult<DMatrix<f64>> {
    let bad = |why: &str| CliError::Io(format!("{}: {why}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != SAMPLE_MAGIC {
        return Err(bad("not a sample dump"));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 8 * rows * cols {
        return Err(bad("truncated sample dump"));
    }
    let data: Vec<f64> = bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(DMatrix::from_vec(rows, cols, data))
}
