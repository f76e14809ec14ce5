//! Discrete-domain support: quadrature grids, rasters, seeded synthetic patterns,
//! finite-difference tangents, PGM import and CSV export.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::atoms::{pattern_norm, Atom, AtomParams, Pattern, PreparedAtom};
use crate::error::{Error, Result};
use crate::linalg::Vec2;
use crate::transforms::TransformModel;

/// Window and step of the square quadrature grid `[-L, L]^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureSpec {
    pub half_width: f64,
    pub step: f64,
    #[serde(default = "default_boundary_tol")]
    pub boundary_tol: f64,
}

fn default_boundary_tol() -> f64 {
    1e-6
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec { half_width: 12.0, step: 0.05, boundary_tol: 1e-6 }
    }
}

/// Support margin, in units of the largest atom scale, kept inside a fitted window.
const SUPPORT_MARGIN: f64 = 4.5;
/// A fitted step resolves the narrowest atom with at least this many samples per scale.
const SAMPLES_PER_SIGMA: f64 = 4.0;

impl QuadratureSpec {
    pub fn new(half_width: f64, step: f64, boundary_tol: f64) -> Result<Self> {
        if !(half_width > 0.0 && step > 0.0 && step <= half_width / 10.0 && boundary_tol > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "quadrature needs L > 0, 0 < h <= L/10, tol > 0 (got L={half_width}, h={step}, tol={boundary_tol})"
            )));
        }
        Ok(QuadratureSpec { half_width, step, boundary_tol })
    }

    /// Grid adapted to the given patterns: the window covers every atom out to
    /// `4.5 sigma_max`, and the step is `max(base.step, sigma_min / 4)`.
    pub fn fit(patterns: &[&Pattern], base: &QuadratureSpec) -> QuadratureSpec {
        let mut reach: f64 = 0.0;
        let mut sigma_min = f64::INFINITY;
        for p in patterns {
            for a in &p.atoms {
                let [sx, sy] = a.params.sigma();
                let [tx, ty] = a.params.tau();
                reach = reach.max(tx.abs().max(ty.abs()) + SUPPORT_MARGIN * sx.max(sy));
                sigma_min = sigma_min.min(sx.min(sy));
            }
        }
        if !reach.is_finite() || reach == 0.0 {
            return *base;
        }
        let step = base.step.max(sigma_min / SAMPLES_PER_SIGMA).min(reach / 10.0);
        QuadratureSpec { half_width: reach, step, boundary_tol: base.boundary_tol }
    }

    pub fn grid(&self) -> Grid {
        let n = (2.0 * self.half_width / self.step).ceil() as usize + 1;
        Grid { origin: -self.half_width, h: self.step, n }
    }

    /// Border-ring mass check shared by every quadrature-backed quantity.
    pub(crate) fn check_ring(&self, ring: f64, total: f64) -> Result<()> {
        if total > 0.0 && ring / total > self.boundary_tol {
            return Err(Error::WindowTooSmall { ring_fraction: ring / total });
        }
        Ok(())
    }
}

/// Square grid with `n` nodes per axis at `origin + i h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub origin: f64,
    pub h: f64,
    pub n: usize,
}

impl Grid {
    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        self.origin + i as f64 * self.h
    }

    /// Width of the border ring in nodes.
    pub fn ring_width(&self) -> usize {
        (self.n / 20).max(1)
    }

    pub fn on_ring(&self, i: usize, j: usize) -> bool {
        let r = self.ring_width();
        i < r || j < r || i + r >= self.n || j + r >= self.n
    }

    /// Index range of nodes within `[lo, hi]`.
    fn span(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let a = ((lo - self.origin) / self.h).ceil().max(0.0) as usize;
        let b = (((hi - self.origin) / self.h).floor() + 1.0).max(0.0) as usize;
        a.min(self.n)..b.min(self.n)
    }
}

/// Value, gradient and Hessian of a pattern sampled on a grid (row-major, `y` outer).
pub(crate) struct FieldSamples {
    pub val: Vec<f64>,
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
    pub hxx: Vec<f64>,
    pub hxy: Vec<f64>,
    pub hyy: Vec<f64>,
}

impl FieldSamples {
    pub fn sample(atoms: &[PreparedAtom], grid: &Grid) -> FieldSamples {
        let len = grid.n * grid.n;
        let mut f = FieldSamples {
            val: vec![0.0; len],
            gx: vec![0.0; len],
            gy: vec![0.0; len],
            hxx: vec![0.0; len],
            hxy: vec![0.0; len],
            hyy: vec![0.0; len],
        };
        for a in atoms {
            let [ex, ey] = a.half_extent();
            let th = a.theta;
            for j in grid.span(a.tau[1] - ey, a.tau[1] + ey) {
                let uy = grid.coord(j) - a.tau[1];
                for i in grid.span(a.tau[0] - ex, a.tau[0] + ex) {
                    let ux = grid.coord(i) - a.tau[0];
                    let tx = th.xx * ux + th.xy * uy;
                    let ty = th.xy * ux + th.yy * uy;
                    let e = tx * ux + ty * uy;
                    if e > crate::atoms::EXPONENT_CUTOFF {
                        continue;
                    }
                    let w = a.c * (-e).exp();
                    let k = j * grid.n + i;
                    f.val[k] += w;
                    f.gx[k] -= 2.0 * w * tx;
                    f.gy[k] -= 2.0 * w * ty;
                    f.hxx[k] += w * (4.0 * tx * tx - 2.0 * th.xx);
                    f.hxy[k] += w * (4.0 * tx * ty - 2.0 * th.xy);
                    f.hyy[k] += w * (4.0 * ty * ty - 2.0 * th.yy);
                }
            }
        }
        f
    }
}

/// Pixel `(i, j)` sits at world `(x0 + i dx, y0 + j dy)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldMap {
    pub x0: f64,
    pub y0: f64,
    pub dx: f64,
    pub dy: f64,
}

impl WorldMap {
    /// Image of `width x height` pixels covering `[-half_width, half_width]` horizontally,
    /// square pixels, top row at the largest `y`.
    pub fn centered(width: usize, height: usize, half_width: f64) -> WorldMap {
        let pitch = 2.0 * half_width / width as f64;
        let half_height = 0.5 * pitch * height as f64;
        WorldMap { x0: -half_width + 0.5 * pitch, y0: half_height - 0.5 * pitch, dx: pitch, dy: -pitch }
    }

    pub fn world(&self, i: f64, j: f64) -> Vec2 {
        [self.x0 + i * self.dx, self.y0 + j * self.dy]
    }

    pub fn pixel(&self, x: Vec2) -> Vec2 {
        [(x[0] - self.x0) / self.dx, (x[1] - self.y0) / self.dy]
    }

    pub fn pixel_area(&self) -> f64 {
        (self.dx * self.dy).abs()
    }
}

/// Real-valued image with its world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub map: WorldMap,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>, map: WorldMap) -> Result<Self> {
        if width < 2 || height < 2 || data.len() != width * height {
            return Err(Error::InvalidConfig(format!("raster of {width}x{height} with {} samples", data.len())));
        }
        if !(map.dx.is_finite() && map.dy.is_finite() && map.dx != 0.0 && map.dy != 0.0) {
            return Err(Error::InvalidConfig("world map is not invertible".into()));
        }
        Ok(RasterImage { width, height, data, map })
    }

    /// Samples `f` at every pixel center.
    pub fn from_fn(width: usize, height: usize, map: WorldMap, f: impl Fn(Vec2) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for j in 0..height {
            for i in 0..width {
                data.push(f(map.world(i as f64, j as f64)));
            }
        }
        RasterImage::new(width, height, data, map)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.width + i]
    }

    pub fn world(&self, i: usize, j: usize) -> Vec2 {
        self.map.world(i as f64, j as f64)
    }

    /// Bilinear interpolation, zero outside the pixel-center hull.
    pub fn sample(&self, x: Vec2) -> f64 {
        let [u, v] = self.map.pixel(x);
        let (wm, hm) = ((self.width - 1) as f64, (self.height - 1) as f64);
        if !(u >= 0.0 && v >= 0.0 && u <= wm && v <= hm) {
            return 0.0;
        }
        let i = (u.floor() as usize).min(self.width - 2);
        let j = (v.floor() as usize).min(self.height - 2);
        let (fu, fv) = (u - i as f64, v - j as f64);
        let a = self.get(i, j) * (1.0 - fu) + self.get(i + 1, j) * fu;
        let b = self.get(i, j + 1) * (1.0 - fu) + self.get(i + 1, j + 1) * fu;
        a * (1.0 - fv) + b * fv
    }

    /// Riemann-sum inner product with a raster on the same grid.
    pub fn inner(&self, other: &RasterImage) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "rasters must share a grid");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum::<f64>() * self.map.pixel_area()
    }

    pub fn l2_norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> RasterImage {
        RasterImage { data: self.data.iter().map(|v| f(*v)).collect(), ..self.clone() }
    }

    pub fn zip_with(&self, other: &RasterImage, f: impl Fn(f64, f64) -> f64) -> RasterImage {
        assert_eq!(self.data.len(), other.data.len(), "rasters must share a grid");
        RasterImage { data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(), ..self.clone() }
    }
}

/// Square raster of the quadrature grid with `y` increasing with the row index.
pub fn grid_map(spec: &QuadratureSpec) -> (usize, WorldMap) {
    let g = spec.grid();
    (g.n, WorldMap { x0: g.origin, y0: g.origin, dx: g.h, dy: g.h })
}

pub fn rasterize(p: &Pattern, spec: &QuadratureSpec) -> RasterImage {
    let (n, map) = grid_map(spec);
    let f = FieldSamples::sample(&p.prepared(), &spec.grid());
    RasterImage::new(n, n, f.val, map).expect("grids have at least two nodes")
}

pub fn rasterize_field(f: impl Fn(Vec2) -> f64, spec: &QuadratureSpec) -> RasterImage {
    let (n, map) = grid_map(spec);
    RasterImage::from_fn(n, n, map, f).expect("grids have at least two nodes")
}

/// Reproducible generator for stream `stream` of master seed `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Sampling ranges for random atoms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtomRanges {
    pub tau: [f64; 2],
    pub sigma: [f64; 2],
    pub coeff: [f64; 2],
}

impl AtomRanges {
    /// Reference-pattern dictionary ranges.
    pub const REFERENCE: AtomRanges = AtomRanges { tau: [-4.0, 4.0], sigma: [0.3, 2.3], coeff: [-1.0, 1.0] };
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Atom with uniform angle in `[-pi, pi)` and uniform center, scales and coefficient.
pub fn random_atom(rng: &mut impl Rng, r: &AtomRanges) -> Atom {
    let psi = uniform(rng, [-std::f64::consts::PI, std::f64::consts::PI]);
    let tau = [uniform(rng, r.tau), uniform(rng, r.tau)];
    let sigma = [uniform(rng, r.sigma), uniform(rng, r.sigma)];
    let c = uniform(rng, r.coeff);
    Atom { c, params: AtomParams::with_parts(psi, tau, sigma) }
}

pub fn random_atoms(rng: &mut impl Rng, count: usize, r: &AtomRanges) -> Pattern {
    Pattern::new((0..count).map(|_| random_atom(rng, r)).collect())
}

/// Number of atoms in a random reference pattern.
pub const REFERENCE_ATOMS: usize = 20;

/// Random 20-atom reference pattern.
pub fn synth_random_reference(seed: u64) -> Pattern {
    random_atoms(&mut ChaCha8Rng::seed_from_u64(seed), REFERENCE_ATOMS, &AtomRanges::REFERENCE)
}

/// Half-width of the square where noise atoms are centered.
pub const NOISE_HALF_WIDTH: f64 = 6.0;
/// Default noise atom count and scales.
pub const NOISE_ATOMS: usize = 100;
pub const NOISE_SCALES: [f64; 2] = [0.15, 0.5];

/// Noise pattern of `count` small atoms with standard-normal coefficients, rescaled to
/// norm `target_nu`.
pub fn synth_noise_pattern(count: usize, scale_range: [f64; 2], target_nu: f64, seed: u64) -> Result<Pattern> {
    synth_noise_with(&mut ChaCha8Rng::seed_from_u64(seed), count, scale_range, target_nu)
}

pub fn synth_noise_with(rng: &mut impl Rng, count: usize, scale_range: [f64; 2], target_nu: f64) -> Result<Pattern> {
    if !(target_nu >= 0.0 && target_nu.is_finite()) {
        return Err(Error::InvalidConfig(format!("noise level {target_nu} must be >= 0")));
    }
    if !(scale_range[0] >= crate::atoms::MIN_SIGMA && scale_range[0] <= scale_range[1]) {
        return Err(Error::InvalidConfig(format!("noise scale range {scale_range:?}")));
    }
    if target_nu == 0.0 || count == 0 {
        return Ok(Pattern::default());
    }
    let half = NOISE_HALF_WIDTH;
    let atoms: Vec<Atom> = (0..count)
        .map(|_| {
            let psi = uniform(rng, [-std::f64::consts::PI, std::f64::consts::PI]);
            let tau = [uniform(rng, [-half, half]), uniform(rng, [-half, half])];
            let sigma = [uniform(rng, scale_range), uniform(rng, scale_range)];
            let c: f64 = rng.sample(StandardNormal);
            Atom { c, params: AtomParams::with_parts(psi, tau, sigma) }
        })
        .collect();
    let raw = Pattern::new(atoms);
    let norm = pattern_norm(&raw)?;
    Ok(raw.scaled(target_nu / norm))
}

/// Central-difference tangents of a warped raster.
#[derive(Debug, Clone)]
pub struct FdTangents {
    pub fields: Vec<RasterImage>,
    /// Set when the parameter step moves sample points by far less than a pixel.
    pub ill_conditioned: bool,
}

/// `d/d lambda_i p(a(lambda, X))` by central differences of bilinear resampling.
pub fn finite_difference_tangents(p: &RasterImage, model: &TransformModel, lam: &[f64], step: f64) -> FdTangents {
    let pitch = p.map.dx.abs().min(p.map.dy.abs());
    let fields = (0..model.dim())
        .map(|axis| {
            let (mut lp, mut lm) = (lam.to_vec(), lam.to_vec());
            lp[axis] += step;
            lm[axis] -= step;
            let mut data = Vec::with_capacity(p.data.len());
            for j in 0..p.height {
                for i in 0..p.width {
                    let x = p.world(i, j);
                    let hi = p.sample(model.coord_map(&lp, x));
                    let lo = p.sample(model.coord_map(&lm, x));
                    data.push((hi - lo) / (2.0 * step));
                }
            }
            RasterImage { data, ..p.clone() }
        })
        .collect();
    FdTangents { fields, ill_conditioned: step < 1e-4 * pitch }
}

/// Parses a binary (P5) PGM with 8- or 16-bit samples into values in `[0, 1]`.
pub fn parse_pgm(bytes: &[u8], map: Option<WorldMap>) -> Result<RasterImage> {
    let err = |offset: usize, message: &str| Error::Parse { offset, message: message.to_string() };
    if bytes.len() < 2 {
        return Err(err(0, "missing magic number"));
    }
    match &bytes[..2] {
        b"P5" => {}
        b"P2" => return Err(err(0, "ASCII PGM (P2) is not supported; convert to binary P5")),
        _ => return Err(err(0, "not a PGM file (expected magic P5)")),
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(err(pos, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(err(pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(start, "header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(err(pos, "expected whitespace after maxval"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width < 2 || height < 2 {
        return Err(err(pos, "image must be at least 2x2"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(err(pos, "maxval must be in 1..=65535"));
    }
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = width * height * bps;
    if bytes.len() < pos + need {
        return Err(err(bytes.len(), &format!("expected {need} bytes of pixel data")));
    }
    let data = bytes[pos..pos + need]
        .chunks_exact(bps)
        .map(|c| {
            let v = if bps == 1 { c[0] as f64 } else { u16::from_be_bytes([c[0], c[1]]) as f64 };
            v / maxval as f64
        })
        .collect();
    let map = map.unwrap_or_else(|| WorldMap::centered(width, height, NOISE_HALF_WIDTH));
    RasterImage::new(width, height, data, map)
}

/// Loads a binary PGM; the default world window spans `[-6, 6]` horizontally.
pub fn load_pgm(path: &Path) -> Result<RasterImage> {
    parse_pgm(&std::fs::read(path)?, None)
}

/// Writes a 16-bit binary PGM, clamping values to `[0, 1]`.
pub fn save_pgm16(img: &RasterImage, path: &Path) -> Result<()> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for v in &img.data {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Column-ordered table written as CSV.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    /// Lines written before the header, each prefixed with `# `.
    pub comments: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Shortest round-trip decimal form.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:?}")
    }
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table { comments: Vec::new(), columns: columns.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width must match the header");
        self.rows.push(row);
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let mut w = w;
        for c in &self.comments {
            writeln!(w, "# {c}")?;
        }
        let mut csv = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        csv.write_record(&self.columns).map_err(to_io)?;
        for r in &self.rows {
            csv.write_record(r).map_err(to_io)?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("CSV is UTF-8")
    }
}

pub fn save_csv(table: &Table, path: &Path) -> Result<()> {
    table.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
}
