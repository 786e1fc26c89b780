//! Scalar fields on regular grids.
//!
//! A [`ScalarGrid`] stores one value per vertex of a 1D, 2D or 3D regular grid in row-major
//! order with the last axis varying fastest. The piecewise-linear structure used by the
//! topology code is the Freudenthal triangulation of the grid, exposed through
//! [`ScalarGrid::neighbors`]. Ties between equal values are broken by vertex index, which
//! gives the strict total order every sweep relies on.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magic bytes opening every RSF file.
pub const RSF_MAGIC: &[u8; 4] = b"RSF1";

/// Storage type of the RSF payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Integer grid coordinates padded to three axes.
///
/// Lower-dimensional grids are embedded by prepending unit axes, so a 2D grid of dims
/// `[a, b]` is the 3D grid `[1, a, b]` and flat indices are unchanged.
pub type Coord = [usize; 3];

/// Scalar values on a 1D, 2D or 3D regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    values: Vec<f64>,
    name: String,
    shape: [usize; 3],
}

impl ScalarGrid {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        validate_dims(&dims)?;
        let n: usize = dims.iter().product();
        if values.len() != n {
            return Err(Error::Shape(format!(
                "values length {} does not match product of dims {n}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        let spacing = vec![1.0; dims.len()];
        let shape = pad_shape(&dims);
        Ok(Self {
            dims,
            spacing,
            values,
            name: String::new(),
            shape,
        })
    }

    /// A grid of the given dims filled with `value`.
    pub fn constant(dims: Vec<usize>, value: f64) -> Result<Self> {
        validate_dims(&dims)?;
        let n = dims.iter().product();
        Self::new(dims, vec![value; n])
    }

    pub fn with_spacing(mut self, spacing: Vec<f64>) -> Result<Self> {
        if spacing.len() != self.dims.len() || spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Shape("spacing must be positive, one entry per axis".into()));
        }
        self.spacing = spacing;
        Ok(self)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn value(&self, v: usize) -> f64 {
        self.values[v]
    }

    /// Dims padded to three axes (leading unit axes).
    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    /// Largest extent over all axes.
    pub fn max_extent(&self) -> usize {
        self.dims.iter().copied().max().unwrap_or(1)
    }

    #[inline]
    pub fn coord(&self, v: usize) -> Coord {
        let [_, s1, s2] = self.shape;
        [v / (s1 * s2), (v / s2) % s1, v % s2]
    }

    #[inline]
    pub fn index(&self, c: Coord) -> usize {
        let [_, s1, s2] = self.shape;
        (c[0] * s1 + c[1]) * s2 + c[2]
    }

    /// Flat index of a signed coordinate, or `None` outside the grid.
    #[inline]
    pub fn index_signed(&self, c: [i64; 3]) -> Option<usize> {
        let mut u = [0usize; 3];
        for a in 0..3 {
            if c[a] < 0 || c[a] >= self.shape[a] as i64 {
                return None;
            }
            u[a] = c[a] as usize;
        }
        Some(self.index(u))
    }

    /// Coordinates of `v` restricted to the grid's own axes.
    pub fn axis_coords(&self, v: usize) -> Vec<usize> {
        let c = self.coord(v);
        c[3 - self.ndim()..].to_vec()
    }

    /// `(min, max)` over all values.
    pub fn range(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Compares two vertices under the symbolically perturbed order: by value, then by index.
    #[inline]
    pub fn cmp_vertices(&self, a: usize, b: usize) -> Ordering {
        self.values[a]
            .partial_cmp(&self.values[b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }

    /// Whether `a` precedes `b` in the vertex order.
    #[inline]
    pub fn precedes(&self, a: usize, b: usize) -> bool {
        self.cmp_vertices(a, b) == Ordering::Less
    }

    /// All vertices sorted ascending in the vertex order.
    pub fn sorted_vertices(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_unstable_by(|&a, &b| self.cmp_vertices(a, b));
        order
    }

    /// The link of `v` in the Freudenthal triangulation.
    pub fn neighbors(&self, v: usize) -> Result<Vec<usize>> {
        if v >= self.len() {
            return Err(Error::VertexOutOfRange(v, self.len()));
        }
        let mut out = Vec::with_capacity(14);
        self.for_each_neighbor(v, |u| out.push(u));
        Ok(out)
    }

    /// Calls `f` for every neighbor of `v`. `v` must be in range.
    #[inline]
    pub fn for_each_neighbor(&self, v: usize, mut f: impl FnMut(usize)) {
        let c = self.coord(v);
        for off in FREUDENTHAL_OFFSETS.iter() {
            let mut ok = true;
            let mut n = [0usize; 3];
            for a in 0..3 {
                let x = c[a] as i64 + off[a];
                if x < 0 || x >= self.shape[a] as i64 {
                    ok = false;
                    break;
                }
                n[a] = x as usize;
            }
            if ok {
                f(self.index(n));
            }
        }
    }

    /// Same dims and spacing, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        let mut g = ScalarGrid::new(self.dims.clone(), values)?;
        g.spacing = self.spacing.clone();
        g.name = self.name.clone();
        Ok(g)
    }
}

/// Edges of the Freudenthal triangulation: every non-zero vector in `{0,1}^3` and its negation.
/// Offsets along unit axes fall outside the grid for padded dimensions, so the same table
/// serves 1D (2 neighbors), 2D (6) and 3D (14).
const FREUDENTHAL_OFFSETS: [[i64; 3]; 14] = [
    [0, 0, 1],
    [0, 1, 0],
    [0, 1, 1],
    [1, 0, 0],
    [1, 0, 1],
    [1, 1, 0],
    [1, 1, 1],
    [0, 0, -1],
    [0, -1, 0],
    [0, -1, -1],
    [-1, 0, 0],
    [-1, 0, -1],
    [-1, -1, 0],
    [-1, -1, -1],
];

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > 3 {
        return Err(Error::Shape(format!(
            "dimension count must be 1, 2 or 3 (got {})",
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Shape("dims must be >= 1".into()));
    }
    Ok(())
}

fn pad_shape(dims: &[usize]) -> [usize; 3] {
    let mut s = [1usize; 3];
    let off = 3 - dims.len();
    s[off..].copy_from_slice(dims);
    s
}

pub fn load_rsf(path: impl AsRef<Path>) -> Result<ScalarGrid> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let grid = decode_rsf(&bytes)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(grid.with_name(name))
}

pub fn save_rsf(grid: &ScalarGrid, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_rsf(grid, dtype)?;
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn encode_rsf(grid: &ScalarGrid, dtype: Dtype) -> Result<Vec<u8>> {
    validate_dims(grid.dims())?;
    if let Some(i) = grid.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    let mut out = Vec::with_capacity(6 + 4 * grid.ndim() + grid.len() * dtype.width());
    out.extend_from_slice(RSF_MAGIC);
    out.push(grid.ndim() as u8);
    for &d in grid.dims() {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(dtype as u8);
    match dtype {
        Dtype::F32 => {
            for &v in grid.values() {
                let x = v as f32;
                if !x.is_finite() {
                    return Err(Error::Shape(format!("value {v} overflows f32")));
                }
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in grid.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_rsf(bytes: &[u8]) -> Result<ScalarGrid> {
    let fail = |offset: usize, msg: &str| Error::Format {
        offset,
        msg: msg.to_string(),
    };
    if bytes.len() < 5 || &bytes[..4] != RSF_MAGIC {
        return Err(fail(0, "bad magic"));
    }
    let d = bytes[4] as usize;
    if !(1..=3).contains(&d) {
        return Err(fail(4, "dimension count must be 1, 2 or 3"));
    }
    let mut pos = 5;
    let mut dims = Vec::with_capacity(d);
    for _ in 0..d {
        let chunk = bytes.get(pos..pos + 4).ok_or_else(|| fail(pos, "truncated header"))?;
        let e = u32::from_le_bytes(chunk.try_into().unwrap()) as usize;
        if e == 0 {
            return Err(fail(pos, "dims must be >= 1"));
        }
        dims.push(e);
        pos += 4;
    }
    let dtype = match bytes.get(pos) {
        Some(0) => Dtype::F32,
        Some(1) => Dtype::F64,
        Some(_) => return Err(fail(pos, "unknown dtype")),
        None => return Err(fail(pos, "truncated header")),
    };
    pos += 1;
    let n: usize = dims.iter().product();
    let expected = n * dtype.width();
    if bytes.len() - pos != expected {
        return Err(fail(
            pos,
            &format!(
                "payload length mismatch: expected {expected} bytes, found {}",
                bytes.len() - pos
            ),
        ));
    }
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let at = pos + i * dtype.width();
        let v = match dtype {
            Dtype::F32 => f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64,
            Dtype::F64 => f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()),
        };
        if !v.is_finite() {
            return Err(fail(at, "non-finite value"));
        }
        values.push(v);
    }
    ScalarGrid::new(dims, values)
}

/// Reads a 2D grid from CSV: one row per index of the first axis, no header.
pub fn load_csv(path: impl AsRef<Path>) -> Result<ScalarGrid> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Csv(e.to_string()))?;
    let mut rows = 0usize;
    let mut cols = None;
    let mut values = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        match cols {
            None => cols = Some(rec.len()),
            Some(c) if c != rec.len() => {
                return Err(Error::Csv(format!("row {rows} has {} columns, expected {c}", rec.len())))
            }
            _ => {}
        }
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Csv(format!("row {rows}: cannot parse {field:?}")))?;
            values.push(v);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Csv("empty CSV".into()))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(ScalarGrid::new(vec![rows, cols], values)?.with_name(name))
}

/// One Gaussian bump: `height * exp(-|x - center|^2 / (2 width^2))`, coordinates in vertex units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hill {
    pub center: Vec<f64>,
    pub height: f64,
    pub width: f64,
}

impl Hill {
    pub fn new(center: Vec<f64>, height: f64, width: f64) -> Self {
        Self { center, height, width }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().zip(&self.center).map(|(a, b)| (a - b) * (a - b)).sum();
        self.height * (-r2 / (2.0 * self.width * self.width)).exp()
    }
}

/// Sum of Gaussian bumps evaluated at every vertex.
pub fn synth_hills(dims: &[usize], hills: &[Hill]) -> Result<ScalarGrid> {
    let mut grid = ScalarGrid::constant(dims.to_vec(), 0.0)?;
    if let Some(h) = hills.iter().find(|h| h.center.len() != dims.len() || !(h.width > 0.0)) {
        return Err(Error::Shape(format!(
            "hill centered at {:?} does not fit a {}-dimensional grid or has non-positive width",
            h.center,
            dims.len()
        )));
    }
    let values: Vec<f64> = (0..grid.len())
        .map(|v| {
            let x: Vec<f64> = grid.axis_coords(v).into_iter().map(|c| c as f64).collect();
            hills.iter().map(|h| h.eval(&x)).sum()
        })
        .collect();
    grid.values = values;
    Ok(grid)
}

/// `count` hills with random centers inside the grid, heights in `[0.5, 1.5]` and widths
/// between 3% and 12% of the largest extent.
pub fn random_hills(dims: &[usize], count: usize, seed: u64) -> Vec<Hill> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = dims.iter().copied().max().unwrap_or(1) as f64;
    (0..count)
        .map(|_| {
            let center = dims.iter().map(|&d| rng.gen::<f64>() * (d.max(1) - 1) as f64).collect();
            let height = rng.gen_range(0.5..=1.5);
            let width = (rng.gen_range(0.03..=0.12) * m).max(0.75);
            Hill { center, height, width }
        })
        .collect()
}

/// Adds uniform noise in `[-amplitude, amplitude]` to every value.
pub fn add_noise(grid: &ScalarGrid, amplitude: f64, seed: u64) -> Result<ScalarGrid> {
    if !(amplitude >= 0.0) || !amplitude.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "noise amplitude must be a finite non-negative number (got {amplitude})"
        )));
    }
    if amplitude == 0.0 {
        return Ok(grid.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = grid
        .values()
        .iter()
        .map(|&v| v + rng.gen_range(-amplitude..=amplitude))
        .collect();
    grid.with_values(values)
}
