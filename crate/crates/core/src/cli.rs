//! The `qdmfa` command line: one subcommand per pipeline stage, files in and
//! files out.
//!
//! Maps travel as QFM files, ODMR cubes as QDCB, results as JSON. JSON results
//! go to `--out` when given, otherwise to stdout. Every file is written with
//! write-then-rename, and nothing depends on hidden state, so a chain such as
//!
//! ```text
//! qdmfa simulate   --scenario kgd.json --out b.qfm
//! qdmfa synth-odmr --field b.qfm --scenario kgd.json --seed 7 --out cube.qdcb
//! qdmfa fit        --cube cube.qdcb --scenario kgd.json --out fit.qfm
//! qdmfa invert     --in fit.qfm --out j.qfm
//! ```
//!
//! can be archived and replayed byte for byte.
//!
//! Exit status: 0 on success, 1 on a domain error (one `error: <Code>: <message>`
//! line on stderr), 2 on a usage error.

use std::ffi::OsString;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fault_analysis::{
    classify_iv, compare_paths, detect_hotspot, lockin_demodulate, trace_current, CompareConfig,
    HotspotConfig, IvConfig, IvCurve, LockInSeries, StopReason, TraceConfig,
};
use crate::magnetostatics::{
    biot_savart_polyline, estimate_depth, invert_bz, rasterize_trace, sheet_forward, CurrentTrace,
    Cutoff, DepthFitConfig, InversionConfig,
};
use crate::maps_io::{
    read_qdcb, read_qfm, render_pgm, subtract, write_atomic, write_qdcb, write_qfm, FieldMap,
    GridGeometry, QfmFile, VectorFieldMap, MASK_CHANNEL, UNIT_DIMENSIONLESS,
};
use crate::nv_model::synthesize_odmr;
use crate::odmr_inversion::{reconstruct_map, FitConfig};
use crate::scenario::Scenario;

#[derive(Debug, Parser)]
#[command(
    name = "qdmfa",
    version,
    about = "Quantum diamond microscope fault analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scenario trace -> field QFM (Biot-Savart polyline model).
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Current trace -> sheet current density QFM.
    Rasterize(RasterizeArgs),
    /// Current density QFM -> field QFM at a standoff (Fourier sheet model).
    Forward {
        #[arg(long = "in")]
        input: PathBuf,
        /// Sensor height above the grid origin plane, m.
        #[arg(long)]
        standoff: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Field QFM + scenario -> ODMR cube (QDCB).
    SynthOdmr {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// ODMR cube -> bias-free field QFM with a mask channel.
    Fit {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        /// Smallest distinguishable dip spacing, Hz (default: half the linewidth).
        #[arg(long)]
        merge_tolerance: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// On-state minus off-state field QFM.
    Diff {
        #[arg(long)]
        on: PathBuf,
        #[arg(long)]
        off: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Field QFM -> current density QFM.
    Invert(InvertArgs),
    /// Field QFM -> wire depth estimate JSON.
    Depth {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "Bz")]
        channel: String,
        #[arg(long, default_value_t = DepthFitConfig::default().residual_limit)]
        residual_limit: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Current density QFM + seed pixel -> streamline JSON.
    Trace {
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        tracing: TracingArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reference and device current density QFMs -> anomaly report JSON.
    Compare {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        dut: PathBuf,
        #[command(flatten)]
        tracing: TracingArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// I-V curve CSV (`voltage_v,current_a`) -> classification JSON.
    Iv {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value_t = IvConfig::default().r2_threshold)]
        r2_threshold: f64,
        #[arg(long, default_value_t = IvConfig::default().open_floor_a)]
        open_floor: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Frame stack QFM (one channel per frame) -> amplitude/phase QFM.
    Lockin {
        #[arg(long = "in")]
        input: PathBuf,
        /// Frame rate, Hz.
        #[arg(long)]
        rate: f64,
        /// Drive frequency, Hz.
        #[arg(long)]
        freq: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Map QFM -> hotspot list JSON.
    Hotspot {
        #[arg(long = "in")]
        input: PathBuf,
        /// Channel to search (default: the first).
        #[arg(long)]
        channel: Option<String>,
        #[arg(long, default_value_t = HotspotConfig::default().sigma_threshold)]
        sigma: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One QFM channel -> 16-bit PGM image.
    Render {
        #[arg(long = "in")]
        input: PathBuf,
        /// Channel to render (default: the first).
        #[arg(long)]
        channel: Option<String>,
        /// Value mapped to black; needs --max.
        #[arg(long, requires = "max")]
        min: Option<f64>,
        /// Value mapped to white; needs --min.
        #[arg(long, requires = "min")]
        max: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct RasterizeArgs {
    /// Take the trace, grid and depth from a scenario.
    #[arg(long, conflicts_with_all = ["trace", "width", "height", "pitch", "depth"])]
    scenario: Option<PathBuf>,
    #[arg(long, required_unless_present = "scenario")]
    trace: Option<PathBuf>,
    #[arg(long, required_unless_present = "scenario")]
    width: Option<usize>,
    #[arg(long, required_unless_present = "scenario")]
    height: Option<usize>,
    /// Pixel pitch, m.
    #[arg(long, required_unless_present = "scenario")]
    pitch: Option<f64>,
    /// Height of the trace plane, m.
    #[arg(long)]
    depth: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InvertArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "Bz")]
    channel: String,
    /// Height of the current sheet, m.
    #[arg(long, default_value_t = 0.0)]
    depth: f64,
    /// `auto` or a wavenumber in rad/m.
    #[arg(long, default_value = "auto", value_parser = parse_cutoff)]
    cutoff: Cutoff,
    #[arg(long, default_value_t = InversionConfig::default().pad_factor)]
    pad: usize,
    /// Invert even if the input carries masked pixels (they hold 0).
    #[arg(long)]
    allow_masked: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TracingArgs {
    /// Seed pixel as `col,row`.
    #[arg(long, value_parser = parse_pixel)]
    seed_px: Option<(usize, usize)>,
    /// Default seed and tracing settings from this scenario.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Step length, pixels.
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    /// Stop below this fraction of max |J|.
    #[arg(long)]
    stop_fraction: Option<f64>,
}

impl TracingArgs {
    fn resolve(&self) -> Result<((usize, usize), TraceConfig)> {
        let scenario = self.scenario.as_deref().map(Scenario::load).transpose()?;
        let mut config = scenario
            .as_ref()
            .map(Scenario::trace_config)
            .unwrap_or_default();
        if let Some(s) = self.step {
            config.step = s;
        }
        if let Some(n) = self.max_steps {
            config.max_steps = n;
        }
        if let Some(f) = self.stop_fraction {
            config.stop_fraction = f;
        }
        let seed = self
            .seed_px
            .or_else(|| {
                scenario
                    .as_ref()
                    .and_then(|s| s.entry_px)
                    .map(|[c, r]| (c, r))
            })
            .ok_or_else(|| {
                Error::InvalidArgument("no --seed-px and no scenario entry_px".into())
            })?;
        Ok((seed, config))
    }
}

fn parse_pixel(s: &str) -> std::result::Result<(usize, usize), String> {
    let (c, r) = s
        .split_once(',')
        .ok_or_else(|| format!("expected col,row, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(c)?, p(r)?))
}

fn parse_cutoff(s: &str) -> std::result::Result<Cutoff, String> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(Cutoff::Auto);
    }
    s.parse::<f64>()
        .map(Cutoff::Value)
        .map_err(|e| format!("expected `auto` or rad/m: {e}"))
}

/// Runs the tool on `argv` (program name first) and returns the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error: {}: {msg}", e.code());
            1
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Simulate { scenario, out } => {
            let s = Scenario::load(&scenario)?;
            let b = biot_savart_polyline(&s.load_trace()?, &s.geometry()?)?;
            write_qfm(&b, &out)?;
            eprintln!("simulate: peak |Bz| {:.4} uT", b.bz().max_abs() * 1e6);
        }
        Command::Rasterize(a) => {
            let (trace, geometry) = match &a.scenario {
                Some(p) => {
                    let s = Scenario::load(p)?;
                    (s.load_trace()?, s.sheet_geometry()?)
                }
                None => {
                    let (Some(t), Some(w), Some(h), Some(p)) =
                        (&a.trace, a.width, a.height, a.pitch)
                    else {
                        unreachable!("clap enforces the grid arguments")
                    };
                    let depth = a.depth.unwrap_or(0.0);
                    (CurrentTrace::load(t)?, GridGeometry::new(w, h, p, depth)?)
                }
            };
            let j = rasterize_trace(&trace, &geometry, geometry.standoff)?;
            write_qfm(&j, &a.out)?;
        }
        Command::Forward {
            input,
            standoff,
            out,
        } => {
            let j = read_qfm(&input)?.current_density()?;
            write_qfm(&sheet_forward(&j, standoff)?, &out)?;
        }
        Command::SynthOdmr {
            field,
            scenario,
            seed,
            out,
        } => {
            let s = Scenario::load(&scenario)?;
            let b = read_qfm(&field)?.vector_field()?;
            if !b.geometry().same_lateral(&s.geometry()?) {
                return Err(Error::GridMismatch(
                    "field map and scenario grids differ".into(),
                ));
            }
            let cube = synthesize_odmr(
                &b,
                &s.frame()?,
                &s.freqs(),
                &s.line_shape(seed),
                &s.constants,
            )?;
            write_qdcb(&cube, &out)?;
        }
        Command::Fit {
            cube,
            scenario,
            merge_tolerance,
            out,
        } => {
            let s = Scenario::load(&scenario)?;
            let cube = read_qdcb(&cube)?;
            let config = FitConfig {
                merge_tolerance_hz: merge_tolerance,
                ..FitConfig::default()
            };
            let rec = reconstruct_map(
                &cube,
                &s.frame()?,
                &s.constants,
                &s.line_shape(0),
                &config,
                s.standoff,
            )?;
            let file = QfmFile::from(&rec.field).with_map(MASK_CHANNEL, &rec.mask);
            write_qfm(file, &out)?;
            eprintln!(
                "fit: {}/{} pixels valid",
                rec.valid_count(),
                cube.n_pixels()
            );
        }
        Command::Diff { on, off, out } => {
            let (on, off) = (read_qfm(&on)?, read_qfm(&off)?);
            let d = subtract(&on.vector_field()?, &off.vector_field()?)?;
            match combined_mask(&on, &off)? {
                Some(mask) => {
                    let vectors: Vec<[f64; 3]> = d
                        .vectors()
                        .into_iter()
                        .zip(mask.data())
                        .map(|(v, &m)| if m > 0.0 { v } else { [0.0; 3] })
                        .collect();
                    let d = VectorFieldMap::from_vectors(*d.geometry(), &vectors)?;
                    write_qfm(QfmFile::from(&d).with_map(MASK_CHANNEL, &mask), &out)?;
                }
                None => {
                    write_qfm(&d, &out)?;
                }
            }
        }
        Command::Invert(a) => {
            let file = read_qfm(&a.input)?;
            if let Some(mask) = file.mask() {
                let masked = mask?.data().iter().filter(|&&m| m <= 0.0).count();
                if masked > 0 && !a.allow_masked {
                    return Err(Error::MaskedPixels(format!(
                        "{masked} pixels of {:?} are masked; pass --allow-masked to invert anyway",
                        a.input
                    )));
                }
            }
            let config = InversionConfig {
                cutoff: a.cutoff,
                pad_factor: a.pad,
                ..InversionConfig::default()
            };
            let j = invert_bz(&file.field_map(&a.channel)?, a.depth, &config)?;
            write_qfm(&j, &a.out)?;
        }
        Command::Depth {
            input,
            channel,
            residual_limit,
            out,
        } => {
            let bz = read_qfm(&input)?.field_map(&channel)?;
            let config = DepthFitConfig {
                residual_limit,
                ..DepthFitConfig::default()
            };
            let est = estimate_depth(&bz, &config)?;
            emit_json(&est, out.as_deref())?;
        }
        Command::Trace {
            input,
            tracing,
            out,
        } => {
            let j = read_qfm(&input)?.current_density()?;
            let (seed, config) = tracing.resolve()?;
            let path = trace_current(&j, seed, &config)?;
            let pitch = j.geometry().pitch;
            let report = TraceReport {
                seed_px: [seed.0, seed.1],
                seed_index: path.seed_index,
                reason: path.reason,
                upstream_reason: path.upstream_reason,
                points_m: path.points_m(pitch),
                points_px: path.points,
            };
            emit_json(&report, out.as_deref())?;
        }
        Command::Compare {
            reference,
            dut,
            tracing,
            out,
        } => {
            let j_ref = read_qfm(&reference)?.current_density()?;
            let j_dut = read_qfm(&dut)?.current_density()?;
            let (seed, trace) = tracing.resolve()?;
            let config = CompareConfig {
                trace,
                ..CompareConfig::default()
            };
            let report = compare_paths(&j_ref, &j_dut, seed, &config)?;
            emit_json(&report, out.as_deref())?;
        }
        Command::Iv {
            csv,
            r2_threshold,
            open_floor,
            out,
        } => {
            let curve = IvCurve::from_csv(File::open(&csv)?)?;
            let config = IvConfig {
                r2_threshold,
                open_floor_a: open_floor,
            };
            emit_json(&classify_iv(&curve, &config), out.as_deref())?;
        }
        Command::Lockin {
            input,
            rate,
            freq,
            out,
        } => {
            let file = read_qfm(&input)?;
            let frames = file
                .channels
                .iter()
                .map(|c| FieldMap::new(file.geometry, c.unit.clone(), c.data.clone()))
                .collect::<Result<Vec<_>>>()?;
            let (amp, phase) = lockin_demodulate(&LockInSeries::new(frames, rate, freq)?)?;
            let result = QfmFile::single("amplitude", &amp).with_map("phase", &phase);
            write_qfm(result, &out)?;
        }
        Command::Hotspot {
            input,
            channel,
            sigma,
            out,
        } => {
            let map = pick_channel(&read_qfm(&input)?, channel.as_deref())?;
            let spots = detect_hotspot(
                &map,
                &HotspotConfig {
                    sigma_threshold: sigma,
                },
            );
            emit_json(&spots, out.as_deref())?;
        }
        Command::Render {
            input,
            channel,
            min,
            max,
            out,
        } => {
            let map = pick_channel(&read_qfm(&input)?, channel.as_deref())?;
            render_pgm(&map, min.zip(max), &out)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TraceReport {
    seed_px: [usize; 2],
    seed_index: usize,
    reason: StopReason,
    upstream_reason: Option<StopReason>,
    points_px: Vec<[f64; 2]>,
    points_m: Vec<[f64; 2]>,
}

fn pick_channel(file: &QfmFile, name: Option<&str>) -> Result<FieldMap> {
    match name {
        Some(n) => file.field_map(n),
        None => {
            let first = file
                .channels
                .first()
                .ok_or_else(|| Error::Format("file has no channels".into()))?;
            file.field_map(&first.name)
        }
    }
}

/// Product of the masks present on either side, if any.
fn combined_mask(a: &QfmFile, b: &QfmFile) -> Result<Option<FieldMap>> {
    let (ma, mb) = (a.mask().transpose()?, b.mask().transpose()?);
    Ok(match (ma, mb) {
        (None, None) => None,
        (Some(m), None) | (None, Some(m)) => Some(m),
        (Some(x), Some(y)) => {
            let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
            Some(FieldMap::new(*x.geometry(), UNIT_DIMENSIONLESS, data)?)
        }
    })
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string(value)?;
    text.push('\n');
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            std::io::stdout().lock().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}
