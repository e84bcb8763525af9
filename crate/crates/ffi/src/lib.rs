//! C ABI over the `qdmfa` toolkit.
//!
//! Maps cross the boundary as opaque [`QdmfaMap`] handles: a grid plus named
//! channels, the in-memory form of a QFM file. Every fallible call returns a
//! [`QdmfaStatus`]; on failure the message is available from
//! [`qdmfa_last_error_message`] until the next failing call on the same thread.
//! Handles returned through `out` pointers belong to the caller and are
//! released with [`qdmfa_map_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use qdmfa::fault_analysis::{
    classify_iv, lockin_demodulate, IvClass, IvConfig, IvCurve, LockInSeries,
};
use qdmfa::magnetostatics::{
    biot_savart_polyline, invert_bz, sheet_forward, Cutoff, InversionConfig,
};
use qdmfa::maps_io::{read_qfm, write_qfm, FieldMap, GridGeometry, QfmChannel, QfmFile};
use qdmfa::nv_model::{resonance_pair, NVConstants, Vec3};
use qdmfa::scenario::Scenario;
use qdmfa::Error;

/// Outcome of a call. `QDMFA_STATUS_OK` is zero; every other value names the
/// failure class.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QdmfaStatus {
    Ok = 0,
    NullPointer,
    InvalidUtf8,
    Panic,
    InvalidGrid,
    NonFinite,
    GridMismatch,
    InvalidArgument,
    Format,
    ChannelNameTooLong,
    Io,
    Json,
    Csv,
    SweepTooNarrow,
    NoDipsFound,
    DegenerateResonances,
    AmbiguousAssignment,
    NoConvergence,
    PoorFit,
    SingularAxes,
    BiasMarginViolated,
    PointOnSegment,
    OutOfPlaneTrace,
    StandoffBelowDepth,
    CutoffAboveNyquist,
    NotWireLike,
    TooFewSamples,
    TooFewPeriods,
    SeedBelowThreshold,
    MaskedPixels,
}

impl From<&Error> for QdmfaStatus {
    fn from(e: &Error) -> Self {
        use QdmfaStatus as S;
        match e {
            Error::InvalidGrid(_) => S::InvalidGrid,
            Error::NonFinite(_) => S::NonFinite,
            Error::GridMismatch(_) => S::GridMismatch,
            Error::InvalidArgument(_) => S::InvalidArgument,
            Error::Format(_) => S::Format,
            Error::ChannelNameTooLong(_) => S::ChannelNameTooLong,
            Error::Io(_) => S::Io,
            Error::Json(_) => S::Json,
            Error::Csv(_) => S::Csv,
            Error::SweepTooNarrow { .. } => S::SweepTooNarrow,
            Error::NoDipsFound => S::NoDipsFound,
            Error::DegenerateResonances(..) => S::DegenerateResonances,
            Error::AmbiguousAssignment(_) => S::AmbiguousAssignment,
            Error::NoConvergence(_) => S::NoConvergence,
            Error::PoorFit { .. } => S::PoorFit,
            Error::SingularAxes(_) => S::SingularAxes,
            Error::BiasMarginViolated(_) => S::BiasMarginViolated,
            Error::PointOnSegment(_) => S::PointOnSegment,
            Error::OutOfPlaneTrace(_) => S::OutOfPlaneTrace,
            Error::StandoffBelowDepth { .. } => S::StandoffBelowDepth,
            Error::CutoffAboveNyquist { .. } => S::CutoffAboveNyquist,
            Error::NotWireLike { .. } => S::NotWireLike,
            Error::TooFewSamples { .. } => S::TooFewSamples,
            Error::TooFewPeriods(_) => S::TooFewPeriods,
            Error::SeedBelowThreshold { .. } => S::SeedBelowThreshold,
            Error::MaskedPixels(_) => S::MaskedPixels,
        }
    }
}

/// Opaque map handle.
pub struct QdmfaMap {
    file: QfmFile,
}

/// Grid description, SI units.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QdmfaGrid {
    pub width: usize,
    pub height: usize,
    /// Pixel pitch, m.
    pub pitch: f64,
    /// Plane height, m.
    pub standoff: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QdmfaIvClass {
    ShortSuspected = 0,
    Nominal,
    Open,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QdmfaIvResult {
    pub kind: QdmfaIvClass,
    /// Fitted resistance for a suspected short, otherwise NaN.
    pub resistance_ohm: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

/// A failure carried to the boundary.
struct Failure(QdmfaStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure((&e).into(), format!("{}: {e}", e.code()))
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn null(what: &str) -> Failure {
    Failure(QdmfaStatus::NullPointer, format!("{what} is null"))
}

/// Runs `body`, records any failure for [`qdmfa_last_error_message`] and turns
/// panics into `QDMFA_STATUS_PANIC`.
fn guard(body: impl FnOnce() -> Outcome<()>) -> QdmfaStatus {
    let failure = match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => return QdmfaStatus::Ok,
        Ok(Err(f)) => f,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            Failure(QdmfaStatus::Panic, format!("panic: {msg}"))
        }
    };
    let text = CString::new(failure.1.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
    failure.0
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Outcome<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(QdmfaStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Outcome<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn map_arg<'a>(p: *const QdmfaMap, what: &str) -> Outcome<&'a QfmFile> {
    p.as_ref().map(|m| &m.file).ok_or_else(|| null(what))
}

unsafe fn emit(out: *mut *mut QdmfaMap, file: QfmFile) {
    *out = Box::into_raw(Box::new(QdmfaMap { file }));
}

fn check_out<T>(out: *mut T) -> Outcome<()> {
    if out.is_null() {
        Err(null("out"))
    } else {
        Ok(())
    }
}

/// Message of the last failing call on this thread, or null if none failed.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn qdmfa_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Creates an empty map on a validated grid.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qdmfa_map_new(grid: QdmfaGrid, out: *mut *mut QdmfaMap) -> QdmfaStatus {
    guard(|| {
        check_out(out)?;
        let g = GridGeometry::new(grid.width, grid.height, grid.pitch, grid.standoff)?;
        emit(out, QfmFile::new(g));
        Ok(())
    })
}

/// Releases a map. Null is ignored.
///
/// # Safety
/// `map` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn qdmfa_map_free(map: *mut QdmfaMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Grid of a map.
///
/// # Safety
/// `map` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qdmfa_map_grid(map: *const QdmfaMap, out: *mut QdmfaGrid) -> QdmfaStatus {
    guard(|| {
        let g = map_arg(map, "map")?.geometry;
        check_out(out)?;
        *out = QdmfaGrid {
            width: g.width,
            height: g.height,
            pitch: g.pitch,
            standoff: g.standoff,
        };
        Ok(())
    })
}

/// Adds a channel, or replaces the one with the same name. `data` holds
/// `width * height` values in row-major order.
///
/// # Safety
/// `map` must be a live handle, `name` and `unit` NUL-terminated strings and
/// `data` valid for `len` reads.
#[no_mangle]
pub unsafe extern "C" fn qdmfa_map_set_channel(
    map: *mut QdmfaMap,
    name: *const c_char,
    unit: *const c_char,
    data: *const f64,
    len: usize,
) -> QdmfaStatus {
    guard(|| {
        let file = &mut map.as_mut().ok_or_else(|| null("map"))?.file;
        let name = str_arg(name, "name")?;
        let unit = str_arg(unit, "unit")?;
        let values = slice_arg(data, len, "data")?;
        let checked = FieldMap::new(file.geometry, unit, values.to_vec())?;
        let channel = QfmChannel {
            name: name.to_string(),
            unit: checked.unit().to_string(),
            data: checked.into_data(),
        };
        match file.channels.iter_mut().find(|c| c.name == name) {
            Some(c) => *c = channel,
            None => file.channels.push(channel),
        }
        Ok(())
    })
}

/// Copies a channel into `data`, which must hold `width * height` values.
/// Channels carrying `;` metadata are also found by their base name.
///
/// # Safety
/// `map` must be a live handle, `name` a NUL-terminated string and `data`
/// valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn qdmfa_map_get_channel(
    map: *const QdmfaMap,
    name: *const c_char,
    data: *mut f64,
    len: usize,
) -> QdmfaStatus {
    guard(|| {
        let file = map_arg(map, "map")?;
        let m = file.field_map(str_arg(name, "name")?)?;
        if len != m.data().len() {
            return Err(Error::InvalidArgument(format!(
                "buffer holds {len} values, channel has {}",
                m.data().len()
            ))
            .into());
        }
        check_out(data)?;
        std::slice::from_raw_parts_mut(data, len).copy_from_slice(m.data());
        Ok(())
    })
}

/// Number of channels in a map.
///
/// # Safety
/// `map` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qdmfa_map_channel_count(
    map: *const QdmfaMap,
    out: *mut usize,
) -> QdmfaStatus {
    guard(|| {
        let n = map_arg(map, "map")?.channels.len();
        check_out(out)?;
        *out = n;
        Ok(())
    })
}

/// Reads a QFM file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qdmfa_map_read(
    path: *const c_char,
    out: *mut *mut QdmfaMap,
) -> QdmfaStatus {
    guard(|| {
        check_out(out)?;
        let file = read_qfm(Path::new(str_arg(path, "path")?))?;
        emit(out, file);
        Ok(())
    })
}

/// Writes a map as a QFM file (write-then-rename).
///
/// # Safety
/// `map` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn qdmfa_map_write(map: *const QdmfaMap, path: *const c_char) -> QdmfaStatus {
    guard(|| {
        let file = map_arg(map, "map")?.clone();
        write_qfm(file, Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Field of a scenario's current trace on its sensor grid: a map with `Bx`,
/// `By`, `Bz` in tesla. A relative trace path resolves against `base_dir`.
///
/// # Safety
/// `scenario_json` and `base_dir` must be NUL-terminated strings and `out`
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qdmfa_simulate_scenario(
    scenario_json: *const c_char,
    base_dir: *const c_char,
    out: *mut *mut QdmfaMap,
) -> QdmfaStatus {
    guard(|| {
        check_out(out)?;
        let text = str_arg(scenario_json, "scenario_json")?;
        let s = Scenario::from_json(text, Path::new(str_arg(base_dir, "base_dir")?))?;
        let b = biot_savart_polyline(&s.load_trace()?, &s.geometry()?)?;
        emit(out, (&b).into());
        Ok(())
    })
}

/// Sheet current density (`Jx`, `Jy` in A/m) from the `Bz` channel.
/// `cutoff_rad_per_m <= 0` selects the automatic cutoff.
///
/// # Safety
/// `field` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qdmfa_invert_bz(
    field: *const QdmfaMap,
    depth: f64,
    cutoff_rad_per_m: f64,
    pad_factor: usize,
    out: *mut *mut QdmfaMap,
) -> QdmfaStatus {
    guard(|| {
        let bz = map_arg(field, "field")?.field_map("Bz")?;
        check_out(out)?;
        let config = InversionConfig {
            cutoff: if cutoff_rad_per_m > 0.0 {
                Cutoff::Value(cutoff_rad_per_m)
            } else {
                Cutoff::Auto
            },
            pad_factor,
            ..InversionConfig::default()
        };
        let j = invert_bz(&bz, depth, &config)?;
        emit(out, (&j).into());
        Ok(())
    })
}

/// Field (`Bx`, `By`, `Bz`) of the `Jx`, `Jy` sheet at a sensor height.
///
/// # Safety
/// `current` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qdmfa_sheet_forward(
    current: *const QdmfaMap,
    standoff: f64,
    out: *mut *mut QdmfaMap,
) -> QdmfaStatus {
    guard(|| {
        let j = map_arg(current, "current")?.current_density()?;
        check_out(out)?;
        let b = sheet_forward(&j, standoff)?;
        emit(out, (&b).into());
        Ok(())
    })
}

/// Lower and upper resonance of one NV axis in field `b` (tesla). A null
/// `constants` pointer selects the standard NV constants.
///
/// # Safety
/// `b` and `axis` must point to three values; `constants` must be null or
/// point to two (zero-field splitting Hz, gyromagnetic ratio Hz/T); `lower`
/// and `upper` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qdmfa_resonance_pair(
    b: *const f64,
    axis: *const f64,
    constants: *const f64,
    lower: *mut f64,
    upper: *mut f64,
) -> QdmfaStatus {
    guard(|| {
        let b = slice_arg(b, 3, "b")?;
        let axis = slice_arg(axis, 3, "axis")?;
        let c = if constants.is_null() {
            NVConstants::default()
        } else {
            let c = slice_arg(constants, 2, "constants")?;
            NVConstants::new(c[0], c[1])?
        };
        if b.iter().chain(axis).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field or axis".into()).into());
        }
        check_out(lower)?;
        check_out(upper)?;
        let axis = Vec3::new(axis[0], axis[1], axis[2]);
        let norm = axis.norm();
        if norm == 0.0 {
            return Err(Error::InvalidArgument("axis has zero length".into()).into());
        }
        let (lo, hi) = resonance_pair(&Vec3::new(b[0], b[1], b[2]), &(axis / norm), &c);
        *lower = lo;
        *upper = hi;
        Ok(())
    })
}

/// Classifies an I-V curve of `n` samples.
///
/// # Safety
/// `voltage_v` and `current_a` must be valid for `n` reads and `out` for a
/// write.
#[no_mangle]
pub unsafe extern "C" fn qdmfa_classify_iv(
    voltage_v: *const f64,
    current_a: *const f64,
    n: usize,
    r2_threshold: f64,
    open_floor_a: f64,
    out: *mut QdmfaIvResult,
) -> QdmfaStatus {
    guard(|| {
        let v = slice_arg(voltage_v, n, "voltage_v")?;
        let i = slice_arg(current_a, n, "current_a")?;
        check_out(out)?;
        let curve = IvCurve::new(v.iter().copied().zip(i.iter().copied()).collect())?;
        let config = IvConfig {
            r2_threshold,
            open_floor_a,
        };
        *out = match classify_iv(&curve, &config) {
            IvClass::ShortSuspected { resistance_ohm } => QdmfaIvResult {
                kind: QdmfaIvClass::ShortSuspected,
                resistance_ohm,
            },
            IvClass::Nominal => QdmfaIvResult {
                kind: QdmfaIvClass::Nominal,
                resistance_ohm: f64::NAN,
            },
            IvClass::Open => QdmfaIvResult {
                kind: QdmfaIvClass::Open,
                resistance_ohm: f64::NAN,
            },
        };
        Ok(())
    })
}

/// Per-pixel lock-in of a frame stack: every channel of `frames` is one frame,
/// in acquisition order. Returns a map with `amplitude` and `phase` (rad).
///
/// # Safety
/// `frames` must be a live handle and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qdmfa_lockin(
    frames: *const QdmfaMap,
    sample_rate_hz: f64,
    drive_frequency_hz: f64,
    out: *mut *mut QdmfaMap,
) -> QdmfaStatus {
    guard(|| {
        let file = map_arg(frames, "frames")?;
        check_out(out)?;
        let stack = file
            .channels
            .iter()
            .map(|c| FieldMap::new(file.geometry, c.unit.clone(), c.data.clone()))
            .collect::<qdmfa::Result<Vec<_>>>()?;
        let (amp, phase) = lockin_demodulate(&LockInSeries::new(
            stack,
            sample_rate_hz,
            drive_frequency_hz,
        )?)?;
        emit(
            out,
            QfmFile::single("amplitude", &amp).with_map("phase", &phase),
        );
        Ok(())
    })
}
