//! Grid containers for all 2D imagery plus the on-disk formats.
//!
//! Conventions shared by every container and file:
//!
//! * data is row-major, row 0 is the minimum-y row, column 0 the minimum-x
//!   column; pixel `(col, row)` is centred at `(col * pitch, row * pitch)`;
//! * heights are z coordinates in one common frame: a [`FieldMap`]'s
//!   `standoff` is the z of the plane it samples, a current sheet sits at
//!   z = `depth`;
//! * everything is SI (T, A, m, Hz); persisted floats are IEEE-754 binary64
//!   little-endian.
//!
//! Two binary containers are defined here. QFM (`"QFMP"`) holds any number of
//! named channels over one grid; QDCB (`"QDCB"`) holds an ODMR cube. PGM output
//! is plain 16-bit binary P5.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNIT_TESLA: &str = "T";
pub const UNIT_SHEET_CURRENT: &str = "A/m";
pub const UNIT_DIVERGENCE: &str = "A/m^2";
pub const UNIT_KELVIN: &str = "K";
pub const UNIT_DIMENSIONLESS: &str = "1";
pub const UNIT_AMPERE: &str = "A";

const KNOWN_UNITS: [&str; 6] = [
    UNIT_TESLA,
    UNIT_SHEET_CURRENT,
    UNIT_DIVERGENCE,
    UNIT_KELVIN,
    UNIT_DIMENSIONLESS,
    UNIT_AMPERE,
];

pub const QFM_MAGIC: &[u8; 4] = b"QFMP";
pub const QDCB_MAGIC: &[u8; 4] = b"QDCB";
pub const FORMAT_VERSION: u16 = 1;

/// Minimum number of frequency points in an ODMR cube.
pub const MIN_SWEEP_POINTS: usize = 8;

/// Shape and placement of a sampling grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub width: usize,
    pub height: usize,
    /// Pixel pitch in metres.
    pub pitch: f64,
    /// z of the sampled plane in metres.
    pub standoff: f64,
}

impl GridGeometry {
    pub fn new(width: usize, height: usize, pitch: f64, standoff: f64) -> Result<Self> {
        let g = Self {
            width,
            height,
            pitch,
            standoff,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidGrid(format!(
                "dimensions {}x{} must be at least 1x1",
                self.width, self.height
            )));
        }
        if !(self.pitch.is_finite() && self.pitch > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "pitch {} must be > 0",
                self.pitch
            )));
        }
        if !(self.standoff.is_finite() && self.standoff >= 0.0) {
            return Err(Error::InvalidGrid(format!(
                "standoff {} must be >= 0",
                self.standoff
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn x(&self, col: usize) -> f64 {
        col as f64 * self.pitch
    }

    #[inline]
    pub fn y(&self, row: usize) -> f64 {
        row as f64 * self.pitch
    }

    /// Same width, height, pitch and standoff.
    pub fn same_grid(&self, other: &GridGeometry) -> bool {
        self == other
    }

    /// Same lateral sampling, ignoring the plane height.
    pub fn same_lateral(&self, other: &GridGeometry) -> bool {
        self.width == other.width && self.height == other.height && self.pitch == other.pitch
    }

    pub fn with_standoff(&self, standoff: f64) -> Result<Self> {
        Self::new(self.width, self.height, self.pitch, standoff)
    }

    fn describe(&self) -> String {
        format!(
            "{}x{} pitch {} m standoff {} m",
            self.width, self.height, self.pitch, self.standoff
        )
    }
}

/// One real-valued image on a [`GridGeometry`]. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMap {
    geometry: GridGeometry,
    unit: String,
    data: Vec<f64>,
}

impl FieldMap {
    pub fn new(geometry: GridGeometry, unit: impl Into<String>, data: Vec<f64>) -> Result<Self> {
        geometry.validate()?;
        let unit = unit.into();
        if !KNOWN_UNITS.contains(&unit.as_str()) {
            return Err(Error::InvalidArgument(format!("unknown unit {unit:?}")));
        }
        if data.len() != geometry.len() {
            return Err(Error::InvalidGrid(format!(
                "data length {} does not match {}x{}",
                data.len(),
                geometry.width,
                geometry.height
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "pixel ({}, {}) = {}",
                i % geometry.width,
                i / geometry.width,
                data[i]
            )));
        }
        Ok(Self {
            geometry,
            unit,
            data,
        })
    }

    pub fn zeros(geometry: GridGeometry, unit: impl Into<String>) -> Result<Self> {
        Self::new(geometry, unit, vec![0.0; geometry.len()])
    }

    /// Builds a map by evaluating `f(col, row)` at every pixel.
    pub fn from_fn(
        geometry: GridGeometry,
        unit: impl Into<String>,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(geometry.len());
        for row in 0..geometry.height {
            for col in 0..geometry.width {
                data.push(f(col, row));
            }
        }
        Self::new(geometry, unit, data)
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }
    pub fn width(&self) -> usize {
        self.geometry.width
    }
    pub fn height(&self) -> usize {
        self.geometry.height
    }
    pub fn pitch(&self) -> f64 {
        self.geometry.pitch
    }
    pub fn standoff(&self) -> f64 {
        self.geometry.standoff
    }
    pub fn unit(&self) -> &str {
        &self.unit
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.data[self.geometry.index(col, row)]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Same data and unit placed on a plane at a different height.
    pub fn with_standoff(&self, standoff: f64) -> Result<Self> {
        Ok(Self {
            geometry: self.geometry.with_standoff(standoff)?,
            unit: self.unit.clone(),
            data: self.data.clone(),
        })
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.geometry,
            self.unit.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }
}

/// Co-registered B_x, B_y, B_z in tesla.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldMap {
    bx: FieldMap,
    by: FieldMap,
    bz: FieldMap,
}

impl VectorFieldMap {
    pub fn new(bx: FieldMap, by: FieldMap, bz: FieldMap) -> Result<Self> {
        for (name, c) in [("Bx", &bx), ("By", &by), ("Bz", &bz)] {
            if c.unit() != UNIT_TESLA {
                return Err(Error::InvalidArgument(format!(
                    "{name} has unit {:?}, expected \"T\"",
                    c.unit()
                )));
            }
        }
        if !bx.geometry().same_grid(by.geometry()) || !bx.geometry().same_grid(bz.geometry()) {
            return Err(Error::GridMismatch(
                "vector field components are not co-registered".into(),
            ));
        }
        Ok(Self { bx, by, bz })
    }

    /// Builds a map from per-pixel vectors in row-major order.
    pub fn from_vectors(geometry: GridGeometry, vectors: &[[f64; 3]]) -> Result<Self> {
        if vectors.len() != geometry.len() {
            return Err(Error::InvalidGrid(format!(
                "{} vectors for a {}-pixel grid",
                vectors.len(),
                geometry.len()
            )));
        }
        let comp = |k: usize| vectors.iter().map(|v| v[k]).collect::<Vec<_>>();
        Self::new(
            FieldMap::new(geometry, UNIT_TESLA, comp(0))?,
            FieldMap::new(geometry, UNIT_TESLA, comp(1))?,
            FieldMap::new(geometry, UNIT_TESLA, comp(2))?,
        )
    }

    pub fn uniform(geometry: GridGeometry, b: [f64; 3]) -> Result<Self> {
        Self::from_vectors(geometry, &vec![b; geometry.len()])
    }

    pub fn bx(&self) -> &FieldMap {
        &self.bx
    }
    pub fn by(&self) -> &FieldMap {
        &self.by
    }
    pub fn bz(&self) -> &FieldMap {
        &self.bz
    }
    pub fn components(&self) -> [&FieldMap; 3] {
        [&self.bx, &self.by, &self.bz]
    }
    pub fn geometry(&self) -> &GridGeometry {
        self.bx.geometry()
    }

    #[inline]
    pub fn vector(&self, index: usize) -> [f64; 3] {
        [
            self.bx.data[index],
            self.by.data[index],
            self.bz.data[index],
        ]
    }

    pub fn vectors(&self) -> Vec<[f64; 3]> {
        (0..self.geometry().len()).map(|i| self.vector(i)).collect()
    }

    /// Componentwise sum; both maps must be co-registered.
    pub fn add(&self, other: &VectorFieldMap) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    fn zip_with(&self, other: &VectorFieldMap, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if !self.geometry().same_grid(other.geometry()) {
            return Err(Error::GridMismatch(format!(
                "{} vs {}",
                self.geometry().describe(),
                other.geometry().describe()
            )));
        }
        let zip = |a: &FieldMap, b: &FieldMap| {
            FieldMap::new(
                *a.geometry(),
                UNIT_TESLA,
                a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
            )
        };
        Self::new(
            zip(&self.bx, &other.bx)?,
            zip(&self.by, &other.by)?,
            zip(&self.bz, &other.bz)?,
        )
    }
}

/// Background removal: componentwise `on - off`.
pub fn subtract(on: &VectorFieldMap, off: &VectorFieldMap) -> Result<VectorFieldMap> {
    on.zip_with(off, |a, b| a - b)
}

/// Per-pixel normalized fluorescence spectra on a shared frequency axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ODMRCube {
    width: usize,
    height: usize,
    pitch: f64,
    freqs: Vec<f64>,
    spectra: Vec<f64>,
}

impl ODMRCube {
    /// `spectra` holds `width * height` consecutive spectra of `freqs.len()` values.
    ///
    /// Values are only required to be finite: noise added after the dip model
    /// may push samples below 0 or above 1.
    pub fn new(
        width: usize,
        height: usize,
        pitch: f64,
        freqs: Vec<f64>,
        spectra: Vec<f64>,
    ) -> Result<Self> {
        GridGeometry::new(width, height, pitch, 0.0)?;
        if freqs.len() < MIN_SWEEP_POINTS {
            return Err(Error::TooFewSamples {
                got: freqs.len(),
                need: MIN_SWEEP_POINTS,
            });
        }
        if freqs.iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFinite("sweep frequency".into()));
        }
        if freqs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "sweep frequencies must be strictly increasing".into(),
            ));
        }
        if spectra.len() != width * height * freqs.len() {
            return Err(Error::InvalidGrid(format!(
                "{} spectrum samples for {}x{} pixels of {} points",
                spectra.len(),
                width,
                height,
                freqs.len()
            )));
        }
        if spectra.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("fluorescence sample".into()));
        }
        Ok(Self {
            width,
            height,
            pitch,
            freqs,
            spectra,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn pitch(&self) -> f64 {
        self.pitch
    }
    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }
    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }
    pub fn spectrum(&self, pixel: usize) -> &[f64] {
        let n = self.freqs.len();
        &self.spectra[pixel * n..(pixel + 1) * n]
    }
    pub fn spectra(&self) -> &[f64] {
        &self.spectra
    }

    /// Grid of the cube with the given sensing-plane height.
    pub fn geometry(&self, standoff: f64) -> Result<GridGeometry> {
        GridGeometry::new(self.width, self.height, self.pitch, standoff)
    }

    /// Copy with one pixel's spectrum replaced.
    pub fn with_spectrum(&self, pixel: usize, values: &[f64]) -> Result<Self> {
        let n = self.freqs.len();
        if values.len() != n || pixel >= self.n_pixels() {
            return Err(Error::InvalidArgument(
                "spectrum replacement out of range".into(),
            ));
        }
        let mut spectra = self.spectra.clone();
        spectra[pixel * n..(pixel + 1) * n].copy_from_slice(values);
        Self::new(
            self.width,
            self.height,
            self.pitch,
            self.freqs.clone(),
            spectra,
        )
    }
}

/// k-space window applied by the inverse Biot-Savart filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    Hann,
}

impl WindowKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            WindowKind::Hann => "hann",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hann" => Ok(WindowKind::Hann),
            other => Err(Error::InvalidArgument(format!("unknown window {other:?}"))),
        }
    }
}

/// Filter settings recorded on reconstructed current maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterMetadata {
    pub window: WindowKind,
    /// rad/m
    pub cutoff_wavenumber: f64,
}

/// Sheet current density (J_x, J_y) in A/m on the plane z = `depth`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurrentDensityMap {
    jx: FieldMap,
    jy: FieldMap,
    filter: Option<FilterMetadata>,
}

impl CurrentDensityMap {
    /// The sheet depth is taken from the components' plane height.
    pub fn new(jx: FieldMap, jy: FieldMap, filter: Option<FilterMetadata>) -> Result<Self> {
        for (name, c) in [("Jx", &jx), ("Jy", &jy)] {
            if c.unit() != UNIT_SHEET_CURRENT {
                return Err(Error::InvalidArgument(format!(
                    "{name} has unit {:?}, expected \"A/m\"",
                    c.unit()
                )));
            }
        }
        if !jx.geometry().same_grid(jy.geometry()) {
            return Err(Error::GridMismatch(
                "current density components are not co-registered".into(),
            ));
        }
        Ok(Self { jx, jy, filter })
    }

    pub fn from_components(
        geometry: GridGeometry,
        jx: Vec<f64>,
        jy: Vec<f64>,
        filter: Option<FilterMetadata>,
    ) -> Result<Self> {
        Self::new(
            FieldMap::new(geometry, UNIT_SHEET_CURRENT, jx)?,
            FieldMap::new(geometry, UNIT_SHEET_CURRENT, jy)?,
            filter,
        )
    }

    pub fn jx(&self) -> &FieldMap {
        &self.jx
    }
    pub fn jy(&self) -> &FieldMap {
        &self.jy
    }
    pub fn depth(&self) -> f64 {
        self.jx.standoff()
    }
    pub fn filter(&self) -> Option<FilterMetadata> {
        self.filter
    }
    pub fn geometry(&self) -> &GridGeometry {
        self.jx.geometry()
    }

    /// |J| per pixel.
    pub fn magnitude(&self) -> Vec<f64> {
        self.jx
            .data()
            .iter()
            .zip(self.jy.data())
            .map(|(x, y)| x.hypot(*y))
            .collect()
    }

    pub fn max_magnitude(&self) -> f64 {
        self.magnitude().into_iter().fold(0.0, f64::max)
    }
}

/// One named channel of a QFM file.
#[derive(Debug, Clone, PartialEq)]
pub struct QfmChannel {
    pub name: String,
    pub unit: String,
    pub data: Vec<f64>,
}

/// In-memory image of a QFM file.
#[derive(Debug, Clone, PartialEq)]
pub struct QfmFile {
    pub geometry: GridGeometry,
    pub channels: Vec<QfmChannel>,
}

const JX_NAME: &str = "Jx";
const JY_NAME: &str = "Jy";
pub const MASK_CHANNEL: &str = "mask";

impl QfmFile {
    pub fn new(geometry: GridGeometry) -> Self {
        Self {
            geometry,
            channels: Vec::new(),
        }
    }

    /// A file holding a single named map.
    pub fn single(name: &str, map: &FieldMap) -> Self {
        Self::new(*map.geometry()).with_map(name, map)
    }

    pub fn with_map(mut self, name: &str, map: &FieldMap) -> Self {
        self.channels.push(QfmChannel {
            name: name.to_string(),
            unit: map.unit().to_string(),
            data: map.data().to_vec(),
        });
        self
    }

    pub fn channel(&self, name: &str) -> Option<&QfmChannel> {
        self.channels.iter().find(|c| c.name == name)
    }

    pub fn channel_names(&self) -> Vec<&str> {
        self.channels.iter().map(|c| c.name.as_str()).collect()
    }

    /// Looks a channel up by exact name, falling back to the base name of a
    /// channel carrying `;`-separated metadata (so `Jx` finds `Jx;hann;...`).
    fn find(&self, name: &str) -> Option<&QfmChannel> {
        self.channel(name).or_else(|| {
            self.channels
                .iter()
                .find(|c| c.name.split(';').next() == Some(name))
        })
    }

    pub fn field_map(&self, name: &str) -> Result<FieldMap> {
        let ch = self.find(name).ok_or_else(|| {
            Error::Format(format!(
                "channel {name:?} not present (have {:?})",
                self.channel_names()
            ))
        })?;
        FieldMap::new(self.geometry, ch.unit.clone(), ch.data.clone())
    }

    pub fn vector_field(&self) -> Result<VectorFieldMap> {
        VectorFieldMap::new(
            self.field_map("Bx")?,
            self.field_map("By")?,
            self.field_map("Bz")?,
        )
    }

    pub fn mask(&self) -> Option<Result<FieldMap>> {
        self.channel(MASK_CHANNEL)
            .map(|_| self.field_map(MASK_CHANNEL))
    }

    pub fn current_density(&self) -> Result<CurrentDensityMap> {
        let jx_channel = self
            .find(JX_NAME)
            .ok_or_else(|| Error::Format("channel \"Jx\" not present".into()))?;
        let filter = parse_filter_suffix(&jx_channel.name)?;
        CurrentDensityMap::new(self.field_map(JX_NAME)?, self.field_map(JY_NAME)?, filter)
    }

    /// Serializes to the QFM byte layout.
    pub fn encode(&self) -> Result<Vec<u8>> {
        self.geometry.validate()?;
        let n = self.geometry.len();
        if self.channels.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "{} channels exceed the u16 channel count",
                self.channels.len()
            )));
        }
        let w = u32::try_from(self.geometry.width)
            .map_err(|_| Error::InvalidGrid("width exceeds u32".into()))?;
        let h = u32::try_from(self.geometry.height)
            .map_err(|_| Error::InvalidGrid("height exceeds u32".into()))?;
        for ch in &self.channels {
            for s in [&ch.name, &ch.unit] {
                if s.len() > 255 {
                    return Err(Error::ChannelNameTooLong(s.len()));
                }
                if !s.is_ascii() {
                    return Err(Error::InvalidArgument(format!("{s:?} is not ASCII")));
                }
            }
            if ch.data.len() != n {
                return Err(Error::InvalidGrid(format!(
                    "channel {:?} has {} values, grid has {n}",
                    ch.name,
                    ch.data.len()
                )));
            }
            if ch.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("channel {:?}", ch.name)));
            }
        }

        let mut out = Vec::with_capacity(32 + self.channels.len() * (8 * n + 16));
        out.extend_from_slice(QFM_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&w.to_le_bytes());
        out.extend_from_slice(&h.to_le_bytes());
        out.extend_from_slice(&self.geometry.pitch.to_le_bytes());
        out.extend_from_slice(&self.geometry.standoff.to_le_bytes());
        out.extend_from_slice(&(self.channels.len() as u16).to_le_bytes());
        for ch in &self.channels {
            out.push(ch.name.len() as u8);
            out.extend_from_slice(ch.name.as_bytes());
            out.push(ch.unit.len() as u8);
            out.extend_from_slice(ch.unit.as_bytes());
        }
        for ch in &self.channels {
            for v in &ch.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != QFM_MAGIC {
            return Err(Error::Format("not a QFM file (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported QFM version {version}")));
        }
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        let pitch = r.f64()?;
        let standoff = r.f64()?;
        let geometry = GridGeometry::new(width, height, pitch, standoff)?;
        let n_channels = r.u16()? as usize;
        let mut headers = Vec::with_capacity(n_channels);
        for _ in 0..n_channels {
            let name = r.short_string()?;
            let unit = r.short_string()?;
            headers.push((name, unit));
        }
        let n = geometry.len();
        let mut channels = Vec::with_capacity(n_channels);
        for (name, unit) in headers {
            let data = r.f64s(n)?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("channel {name:?}")));
            }
            channels.push(QfmChannel { name, unit, data });
        }
        r.finish()?;
        Ok(Self { geometry, channels })
    }
}

fn filter_suffix(meta: &FilterMetadata) -> String {
    format!(
        ";{};cutoff={:e}",
        meta.window.as_str(),
        meta.cutoff_wavenumber
    )
}

fn parse_filter_suffix(name: &str) -> Result<Option<FilterMetadata>> {
    let mut parts = name.split(';');
    parts.next();
    let Some(window) = parts.next() else {
        return Ok(None);
    };
    let window = WindowKind::parse(window)?;
    let cutoff = parts
        .next()
        .and_then(|p| p.strip_prefix("cutoff="))
        .ok_or_else(|| Error::Format(format!("bad filter metadata in {name:?}")))?;
    let cutoff_wavenumber = cutoff
        .parse::<f64>()
        .map_err(|_| Error::Format(format!("bad cutoff in {name:?}")))?;
    Ok(Some(FilterMetadata {
        window,
        cutoff_wavenumber,
    }))
}

impl From<&VectorFieldMap> for QfmFile {
    fn from(m: &VectorFieldMap) -> Self {
        QfmFile::new(*m.geometry())
            .with_map("Bx", m.bx())
            .with_map("By", m.by())
            .with_map("Bz", m.bz())
    }
}

impl From<&CurrentDensityMap> for QfmFile {
    fn from(m: &CurrentDensityMap) -> Self {
        let suffix = m.filter().map(|f| filter_suffix(&f)).unwrap_or_default();
        QfmFile::new(*m.geometry())
            .with_map(&format!("{JX_NAME}{suffix}"), m.jx())
            .with_map(&format!("{JY_NAME}{suffix}"), m.jy())
    }
}

impl From<&FieldMap> for QfmFile {
    /// Single channel named after the unit: `B` for tesla maps, `value` otherwise.
    fn from(m: &FieldMap) -> Self {
        let name = if m.unit() == UNIT_TESLA { "B" } else { "value" };
        QfmFile::single(name, m)
    }
}

/// Writes a QFM file atomically and returns the number of bytes written.
pub fn write_qfm(file: impl Into<QfmFile>, path: &Path) -> Result<u64> {
    let bytes = file.into().encode()?;
    write_atomic(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn read_qfm(path: &Path) -> Result<QfmFile> {
    QfmFile::decode(&fs::read(path)?)
}

pub fn encode_qdcb(cube: &ODMRCube) -> Result<Vec<u8>> {
    let w =
        u32::try_from(cube.width).map_err(|_| Error::InvalidGrid("width exceeds u32".into()))?;
    let h =
        u32::try_from(cube.height).map_err(|_| Error::InvalidGrid("height exceeds u32".into()))?;
    let nf = u32::try_from(cube.freqs.len())
        .map_err(|_| Error::InvalidGrid("sweep length exceeds u32".into()))?;
    let mut out = Vec::with_capacity(26 + 8 * (cube.freqs.len() + cube.spectra.len()));
    out.extend_from_slice(QDCB_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&cube.pitch.to_le_bytes());
    out.extend_from_slice(&nf.to_le_bytes());
    for v in cube.freqs.iter().chain(&cube.spectra) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_qdcb(bytes: &[u8]) -> Result<ODMRCube> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != QDCB_MAGIC {
        return Err(Error::Format("not a QDCB file (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported QDCB version {version}")));
    }
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let pitch = r.f64()?;
    let n_freq = r.u32()? as usize;
    let freqs = r.f64s(n_freq)?;
    let spectra = r.f64s(
        width
            .checked_mul(height)
            .and_then(|p| p.checked_mul(n_freq))
            .ok_or_else(|| Error::Format("cube dimensions overflow".into()))?,
    )?;
    r.finish()?;
    ODMRCube::new(width, height, pitch, freqs, spectra)
}

pub fn write_qdcb(cube: &ODMRCube, path: &Path) -> Result<u64> {
    let bytes = encode_qdcb(cube)?;
    write_atomic(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn read_qdcb(path: &Path) -> Result<ODMRCube> {
    decode_qdcb(&fs::read(path)?)
}

/// 16-bit binary PGM bytes for `map`.
///
/// `range` fixes the grey scale; `None` autoscales to the map's min/max and a
/// constant map renders mid-grey. The image's top row is the map's maximum-y
/// row so the picture appears with y pointing up.
pub fn encode_pgm(map: &FieldMap, range: Option<(f64, f64)>) -> Result<Vec<u8>> {
    let (low, high) = match range {
        Some((lo, hi)) => {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidArgument(format!(
                    "render range requires low < high, got [{lo}, {hi}]"
                )));
            }
            (lo, hi)
        }
        None => map.min_max(),
    };
    let span = high - low;
    let level = |v: f64| -> u16 {
        let t = if span > 0.0 {
            ((v - low) / span).clamp(0.0, 1.0)
        } else {
            0.5
        };
        (65535.0 * t).round() as u16
    };

    let header = format!("P5\n{} {}\n65535\n", map.width(), map.height());
    let mut out = Vec::with_capacity(header.len() + 2 * map.data().len());
    out.extend_from_slice(header.as_bytes());
    for row in (0..map.height()).rev() {
        for col in 0..map.width() {
            out.extend_from_slice(&level(map.get(col, row)).to_be_bytes());
        }
    }
    Ok(out)
}

pub fn render_pgm(map: &FieldMap, range: Option<(f64, f64)>, path: &Path) -> Result<u64> {
    let bytes = encode_pgm(map, range)?;
    write_atomic(path, &bytes)?;
    Ok(bytes.len() as u64)
}

/// Write-then-rename so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn short_string(&mut self) -> Result<String> {
        let len = self.take(1)?[0] as usize;
        let raw = self.take(len)?;
        if !raw.is_ascii() {
            return Err(Error::Format("channel label is not ASCII".into()));
        }
        Ok(String::from_utf8(raw.to_vec()).expect("ascii is utf-8"))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}
