//! Grid geometry, calendar timestamps, field containers, latitude weighting
//! and the MRCHK1 field-sequence file format.
//!
//! Everything here is immutable after construction and safe to share across
//! threads. Values are f32 (matching the on-disk format); metric-grade
//! accumulations elsewhere run in f64.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array4};

use crate::error::{Error, Result};

/// Days per month in the fixed 366-day synthetic calendar (Feb always 29).
pub const DAYS_IN_MONTH: [u32; 12] = [31, 29, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];

/// Cumulative days before each month.
pub const CUM_DAYS: [u32; 12] = [0, 31, 60, 91, 121, 152, 182, 213, 244, 274, 305, 335];

/// Hours in the synthetic year: 366 days x 24 h.
pub const HOURS_PER_YEAR: u32 = 8784;

const MAGIC: &[u8; 6] = b"MRCHK1";
const FORMAT_VERSION: u32 = 1;

/// Regular latitude-longitude raster geometry.
///
/// Latitude of row `j` is `lat_start_deg + j * lat_step_deg`; longitude of
/// column `i` is `i * lon_step_deg`, wrapping modulo 360.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridSpec {
    pub n_lat: usize,
    pub n_lon: usize,
    pub lat_start_deg: f64,
    pub lat_step_deg: f64,
    pub lon_step_deg: f64,
}

impl GridSpec {
    pub fn new(
        n_lat: usize,
        n_lon: usize,
        lat_start_deg: f64,
        lat_step_deg: f64,
        lon_step_deg: f64,
    ) -> Result<Self> {
        if n_lat < 2 || n_lon < 2 {
            return Err(Error::Config(format!(
                "grid must be at least 2x2, got {n_lat}x{n_lon}"
            )));
        }
        if lat_step_deg == 0.0 || lon_step_deg <= 0.0 {
            return Err(Error::Config("grid steps must be nonzero".into()));
        }
        let spec = GridSpec {
            n_lat,
            n_lon,
            lat_start_deg,
            lat_step_deg,
            lon_step_deg,
        };
        for j in 0..n_lat {
            let lat = spec.lat_deg(j);
            if !(-90.0..=90.0).contains(&lat) {
                return Err(Error::Config(format!(
                    "latitude center {lat} of row {j} outside [-90, 90]"
                )));
            }
        }
        Ok(spec)
    }

    /// Equator-symmetric grid covering the globe with `n_lat` x `n_lon` cells.
    pub fn global(n_lat: usize, n_lon: usize) -> Result<Self> {
        let lat_step = 180.0 / n_lat as f64;
        let lon_step = 360.0 / n_lon as f64;
        GridSpec::new(n_lat, n_lon, -90.0 + lat_step / 2.0, lat_step, lon_step)
    }

    pub fn lat_deg(&self, row: usize) -> f64 {
        self.lat_start_deg + row as f64 * self.lat_step_deg
    }

    pub fn lon_deg(&self, col: usize) -> f64 {
        (col as f64 * self.lon_step_deg).rem_euclid(360.0)
    }
}

/// Positive cell-area latitude weights, normalized to mean 1.
#[derive(Debug, Clone)]
pub struct LatWeights {
    weights: Array1<f64>,
}

impl LatWeights {
    pub fn as_slice(&self) -> &[f64] {
        self.weights.as_slice().expect("contiguous")
    }

    pub fn get(&self, row: usize) -> f64 {
        self.weights[row]
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Cell-area latitude weights: w_j proportional to
/// sin(phi_j + d/2) - sin(phi_j - d/2) with cell edges clipped to +/-90 deg,
/// normalized so the mean weight is 1.
pub fn latitude_weights(grid: &GridSpec) -> Result<LatWeights> {
    if grid.n_lat < 2 {
        return Err(Error::Config("degenerate grid: n_lat < 2".into()));
    }
    let half = grid.lat_step_deg.abs() / 2.0;
    let mut w = Array1::<f64>::zeros(grid.n_lat);
    for j in 0..grid.n_lat {
        let lat = grid.lat_deg(j);
        let lo = (lat - half).max(-90.0).to_radians();
        let hi = (lat + half).min(90.0).to_radians();
        let area = hi.sin() - lo.sin();
        if area <= 0.0 {
            return Err(Error::Config(format!(
                "non-positive cell area at latitude row {j}"
            )));
        }
        w[j] = area;
    }
    let mean = w.sum() / grid.n_lat as f64;
    w.mapv_inplace(|v| v / mean);
    Ok(LatWeights { weights: w })
}

/// Calendar timestamp in the fixed 366-day leap calendar.
///
/// Carries an absolute step index (count of `step_hours` steps from the
/// dataset start) for ordering; the (month, day, hour) triple maps
/// bijectively onto [0, 8783].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CalendarTime {
    month: u8,
    day: u8,
    hour: u8,
    step_index: i64,
}

impl CalendarTime {
    pub fn new(month: u32, day: u32, hour: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::Data(format!("month {month} out of range")));
        }
        if day < 1 || day > DAYS_IN_MONTH[(month - 1) as usize] {
            return Err(Error::Data(format!("day {day} invalid for month {month}")));
        }
        if hour > 23 {
            return Err(Error::Data(format!("hour {hour} out of range")));
        }
        Ok(CalendarTime {
            month: month as u8,
            day: day as u8,
            hour: hour as u8,
            step_index: 0,
        })
    }

    pub fn month(&self) -> u32 {
        self.month as u32
    }

    pub fn day(&self) -> u32 {
        self.day as u32
    }

    pub fn hour(&self) -> u32 {
        self.hour as u32
    }

    pub fn step_index(&self) -> i64 {
        self.step_index
    }

    /// Zero-based day of year in the 366-day calendar.
    pub fn day_of_year(&self) -> u32 {
        CUM_DAYS[(self.month - 1) as usize] + self.day as u32 - 1
    }

    /// Hour-of-year in [0, 8783].
    pub fn hour_of_year(&self) -> u32 {
        self.day_of_year() * 24 + self.hour as u32
    }

    /// Reconstruct the (month, day, hour) triple from an hour-of-year index.
    pub fn from_hour_of_year(hour_of_year: u32) -> Result<Self> {
        if hour_of_year >= HOURS_PER_YEAR {
            return Err(Error::Data(format!(
                "hour-of-year {hour_of_year} out of range"
            )));
        }
        let day = hour_of_year / 24;
        let hour = hour_of_year % 24;
        let month = (1..=12)
            .rev()
            .find(|&m| CUM_DAYS[m - 1] <= day)
            .expect("month lookup");
        CalendarTime::new(month as u32, day - CUM_DAYS[month - 1] + 1, hour)
    }

    /// Advance by `n_steps` steps of `step_hours` hours, wrapping through the
    /// 366-day year. The step index advances by `n_steps`.
    pub fn advance_steps(&self, n_steps: i64, step_hours: u32) -> Self {
        let total = self.hour_of_year() as i64 + n_steps * step_hours as i64;
        let wrapped = total.rem_euclid(HOURS_PER_YEAR as i64) as u32;
        let mut t = CalendarTime::from_hour_of_year(wrapped).expect("wrapped hour is valid");
        t.step_index = self.step_index + n_steps;
        t
    }

    pub fn with_step_index(mut self, step_index: i64) -> Self {
        self.step_index = step_index;
        self
    }

    /// True when the (month, day, hour) triples match (step indices may differ).
    pub fn same_wall_clock(&self, other: &CalendarTime) -> bool {
        self.month == other.month && self.day == other.day && self.hour == other.hour
    }
}

impl std::fmt::Display for CalendarTime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:02}:{:02}:{:02}", self.month, self.day, self.hour)
    }
}

/// Index of a calendar triple in the 8,784-slot timestamp table.
///
/// `(cumulative days before month, Feb = 29) + day - 1) * 24 + hour`;
/// bijective over the 8,784 slots.
pub fn timestamp_index(t: &CalendarTime) -> usize {
    t.hour_of_year() as usize
}

/// Time-ordered multi-channel field array on a grid.
///
/// `values` has shape `[T, C, H, W]` where `C = n_channels + n_static`;
/// the trailing `n_static` channels are constant across time.
#[derive(Debug, Clone)]
pub struct FieldSequence {
    pub grid: GridSpec,
    pub n_channels: usize,
    pub n_static: usize,
    pub channel_names: Vec<String>,
    pub channel_units: Vec<String>,
    pub start: CalendarTime,
    pub step_hours: u32,
    pub values: Array4<f32>,
}

impl FieldSequence {
    pub fn new(
        grid: GridSpec,
        n_channels: usize,
        n_static: usize,
        channel_names: Vec<String>,
        channel_units: Vec<String>,
        start: CalendarTime,
        step_hours: u32,
        values: Array4<f32>,
    ) -> Result<Self> {
        let (t, c, h, w) = values.dim();
        if t < 1 {
            return Err(Error::Data("field sequence must have T >= 1".into()));
        }
        if c != n_channels + n_static {
            return Err(Error::Data(format!(
                "value channels {c} != n_channels {n_channels} + n_static {n_static}"
            )));
        }
        if h != grid.n_lat || w != grid.n_lon {
            return Err(Error::Data(format!(
                "value grid {h}x{w} does not match spec {}x{}",
                grid.n_lat, grid.n_lon
            )));
        }
        if channel_names.len() != c || channel_units.len() != c {
            return Err(Error::Data("channel metadata length mismatch".into()));
        }
        for name in channel_names.iter().chain(channel_units.iter()) {
            if name.contains(',') || name.contains('\n') || name.contains('=') {
                return Err(Error::Data(format!(
                    "channel metadata '{name}' may not contain ',', '=' or newlines"
                )));
            }
        }
        if step_hours == 0 || 24 % step_hours != 0 {
            return Err(Error::Data(format!(
                "step_hours {step_hours} must divide 24"
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("field sequence contains non-finite values".into()));
        }
        // Static channels must be identical across all frames.
        for s in 0..n_static {
            let ch = n_channels + s;
            let first = values.index_axis(ndarray::Axis(0), 0);
            let first = first.index_axis(ndarray::Axis(0), ch);
            for ti in 1..t {
                let frame = values.index_axis(ndarray::Axis(0), ti);
                let frame = frame.index_axis(ndarray::Axis(0), ch);
                if frame != first {
                    return Err(Error::Data(format!(
                        "static channel {ch} differs between frames 0 and {ti}"
                    )));
                }
            }
        }
        Ok(FieldSequence {
            grid,
            n_channels,
            n_static,
            channel_names,
            channel_units,
            start,
            step_hours,
            values,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.values.dim().0
    }

    pub fn total_channels(&self) -> usize {
        self.n_channels + self.n_static
    }

    /// Calendar time of frame `t` (frame 0 is `start`).
    pub fn time_at(&self, t: usize) -> CalendarTime {
        self.start.advance_steps(t as i64, self.step_hours)
    }

    /// View of a contiguous frame range `[t0, t0 + len)` as a new sequence.
    pub fn slice_frames(&self, t0: usize, len: usize) -> Result<FieldSequence> {
        if t0 + len > self.n_steps() || len == 0 {
            return Err(Error::Data(format!(
                "frame slice [{t0}, {}) out of range (T = {})",
                t0 + len,
                self.n_steps()
            )));
        }
        let values = self
            .values
            .slice(ndarray::s![t0..t0 + len, .., .., ..])
            .to_owned();
        FieldSequence::new(
            self.grid,
            self.n_channels,
            self.n_static,
            self.channel_names.clone(),
            self.channel_units.clone(),
            self.time_at(t0),
            self.step_hours,
            values,
        )
    }
}

/// Latitude-weighted mean of the values whose cell centers lie inside a
/// lat/lon box. Longitude membership is half-open `[lo, hi)` by cell center
/// and wraps modulo 360; a span of 360 or more covers the whole circle.
pub fn box_mean(
    seq: &FieldSequence,
    t: usize,
    c: usize,
    lat_range: (f64, f64),
    lon_range: (f64, f64),
) -> Result<f64> {
    if t >= seq.n_steps() || c >= seq.total_channels() {
        return Err(Error::Data(format!("box_mean index (t={t}, c={c}) out of range")));
    }
    let weights = latitude_weights(&seq.grid)?;
    let (lat_lo, lat_hi) = lat_range;
    let (lon_lo, lon_hi) = lon_range;
    let span = lon_hi - lon_lo;
    let full_circle = span >= 360.0;
    let span_wrapped = span.rem_euclid(360.0);

    let mut num = 0.0_f64;
    let mut den = 0.0_f64;
    for j in 0..seq.grid.n_lat {
        let lat = seq.grid.lat_deg(j);
        if lat < lat_lo || lat > lat_hi {
            continue;
        }
        let w = weights.get(j);
        for i in 0..seq.grid.n_lon {
            let lon = seq.grid.lon_deg(i);
            let inside = full_circle || (lon - lon_lo).rem_euclid(360.0) < span_wrapped;
            if inside {
                num += w * seq.values[[t, c, j, i]] as f64;
                den += w;
            }
        }
    }
    if den == 0.0 {
        return Err(Error::Data("box does not intersect the grid".into()));
    }
    Ok(num / den)
}

// --- MRCHK1 file format -----------------------------------------------------
//
// Layout: 6-byte magic "MRCHK1", 4-byte little-endian header length, UTF-8
// header text (one `key=value` per line), then raw little-endian f32 values
// in [T][C][H][W] order.

fn format_f64(v: f64) -> String {
    // Shortest representation that round-trips exactly.
    format!("{v}")
}

fn header_text(seq: &FieldSequence) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push('=');
        s.push_str(&v);
        s.push('\n');
    };
    kv("version", FORMAT_VERSION.to_string());
    kv("n_lat", seq.grid.n_lat.to_string());
    kv("n_lon", seq.grid.n_lon.to_string());
    kv("lat_start_deg", format_f64(seq.grid.lat_start_deg));
    kv("lat_step_deg", format_f64(seq.grid.lat_step_deg));
    kv("lon_step_deg", format_f64(seq.grid.lon_step_deg));
    kv("n_channels", seq.n_channels.to_string());
    kv("n_static", seq.n_static.to_string());
    kv("channel_names", seq.channel_names.join(","));
    kv("channel_units", seq.channel_units.join(","));
    kv("start_month", seq.start.month().to_string());
    kv("start_day", seq.start.day().to_string());
    kv("start_hour", seq.start.hour().to_string());
    kv("step_hours", seq.step_hours.to_string());
    kv("n_steps", seq.n_steps().to_string());
    s
}

/// Write a field sequence in the MRCHK1 format.
pub fn write_fields(seq: &FieldSequence, path: &Path) -> Result<()> {
    let header = header_text(seq);
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&(header.len() as u32).to_le_bytes())?;
    file.write_all(header.as_bytes())?;
    let flat = seq
        .values
        .as_slice()
        .expect("field values are contiguous in [T][C][H][W] order");
    let mut buf = Vec::with_capacity(flat.len() * 4);
    for v in flat {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&buf)?;
    file.flush()?;
    Ok(())
}

struct Header {
    grid: GridSpec,
    n_channels: usize,
    n_static: usize,
    channel_names: Vec<String>,
    channel_units: Vec<String>,
    start: CalendarTime,
    step_hours: u32,
    n_steps: usize,
}

fn parse_header(text: &str) -> Result<Header> {
    let mut fields = std::collections::HashMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::HeaderParse(format!("malformed header line '{line}'")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<&String> {
        fields
            .get(k)
            .ok_or_else(|| Error::HeaderParse(format!("missing header key '{k}'")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|e| Error::HeaderParse(format!("key '{k}': {e}")))
    };
    let parse_f64 = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|e| Error::HeaderParse(format!("key '{k}': {e}")))
    };
    let version: u32 = get("version")?
        .parse()
        .map_err(|e| Error::HeaderParse(format!("key 'version': {e}")))?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let grid = GridSpec::new(
        parse_usize("n_lat")?,
        parse_usize("n_lon")?,
        parse_f64("lat_start_deg")?,
        parse_f64("lat_step_deg")?,
        parse_f64("lon_step_deg")?,
    )?;
    let split_list = |k: &str| -> Result<Vec<String>> {
        Ok(get(k)?.split(',').map(|s| s.to_string()).collect())
    };
    let start = CalendarTime::new(
        parse_usize("start_month")? as u32,
        parse_usize("start_day")? as u32,
        parse_usize("start_hour")? as u32,
    )?;
    Ok(Header {
        grid,
        n_channels: parse_usize("n_channels")?,
        n_static: parse_usize("n_static")?,
        channel_names: split_list("channel_names")?,
        channel_units: split_list("channel_units")?,
        start,
        step_hours: parse_usize("step_hours")? as u32,
        n_steps: parse_usize("n_steps")?,
    })
}

/// Read a field sequence from the MRCHK1 format.
pub fn read_fields(path: &Path) -> Result<FieldSequence> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 6];
    read_exact_or(&mut file, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: magic.to_vec(),
        });
    }
    let mut len_bytes = [0u8; 4];
    read_exact_or(&mut file, &mut len_bytes, "header length")?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact_or(&mut file, &mut header_bytes, "header")?;
    let header_text = String::from_utf8(header_bytes)
        .map_err(|e| Error::HeaderParse(format!("header is not UTF-8: {e}")))?;
    let header = parse_header(&header_text)?;

    let c_total = header.n_channels + header.n_static;
    let expected = header.n_steps as u64
        * c_total as u64
        * header.grid.n_lat as u64
        * header.grid.n_lon as u64
        * 4;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() as u64 != expected {
        return Err(Error::ShapeDisagreement {
            expected,
            found: payload.len() as u64,
        });
    }
    let mut values = Vec::with_capacity(payload.len() / 4);
    for chunk in payload.chunks_exact(4) {
        values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let array = Array4::from_shape_vec(
        (header.n_steps, c_total, header.grid.n_lat, header.grid.n_lon),
        values,
    )
    .map_err(|e| Error::HeaderParse(format!("shape error: {e}")))?;
    FieldSequence::new(
        header.grid,
        header.n_channels,
        header.n_static,
        header.channel_names,
        header.channel_units,
        header.start,
        header.step_hours,
        array,
    )
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(what)
        } else {
            Error::Io(e)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn toy_sequence(t: usize, grid: GridSpec) -> FieldSequence {
        let c_dyn = 2;
        let c_static = 1;
        let mut values = Array4::<f32>::zeros((t, c_dyn + c_static, grid.n_lat, grid.n_lon));
        let mut stream = crate::rng::SeedStream::new(99);
        for ti in 0..t {
            for c in 0..c_dyn {
                for j in 0..grid.n_lat {
                    for i in 0..grid.n_lon {
                        values[[ti, c, j, i]] = stream.normal() as f32;
                    }
                }
            }
        }
        for j in 0..grid.n_lat {
            for i in 0..grid.n_lon {
                values[[0, c_dyn, j, i]] = (j * grid.n_lon + i) as f32;
            }
        }
        for ti in 1..t {
            for j in 0..grid.n_lat {
                for i in 0..grid.n_lon {
                    values[[ti, c_dyn, j, i]] = values[[0, c_dyn, j, i]];
                }
            }
        }
        FieldSequence::new(
            grid,
            c_dyn,
            c_static,
            vec!["a".into(), "b".into(), "orog".into()],
            vec!["K".into(), "m/s".into(), "m".into()],
            CalendarTime::new(1, 1, 0).unwrap(),
            6,
            values,
        )
        .unwrap()
    }

    #[test]
    fn weights_positive_mean_one_palindrome() {
        let grid = GridSpec::global(24, 48).unwrap();
        let w = latitude_weights(&grid).unwrap();
        assert!(w.as_slice().iter().all(|&v| v > 0.0));
        let mean: f64 = w.as_slice().iter().sum::<f64>() / w.len() as f64;
        assert!((mean - 1.0).abs() < 1e-12, "mean {mean}");
        // Equator-symmetric grid: weights are a palindrome.
        for j in 0..w.len() {
            let diff = (w.get(j) - w.get(w.len() - 1 - j)).abs();
            assert!(diff < 1e-12, "row {j} asymmetry {diff}");
        }
    }

    #[test]
    fn weights_unnormalized_sum_telescopes_to_two() {
        // A grid whose cells tile [-90, 90] exactly: the unnormalized areas
        // telescope to sin(90) - sin(-90) = 2.
        let grid = GridSpec::global(36, 4).unwrap();
        let half = grid.lat_step_deg / 2.0;
        let mut total = 0.0;
        for j in 0..grid.n_lat {
            let lat = grid.lat_deg(j);
            let lo = (lat - half).max(-90.0).to_radians();
            let hi = (lat + half).min(90.0).to_radians();
            total += hi.sin() - lo.sin();
        }
        assert!((total - 2.0).abs() < 1e-12, "total {total}");
    }

    #[test]
    fn weight_ratio_matches_quadrature_oracle() {
        // 1.5 degree grid; compare weight(0 deg) / weight(60 deg N) against an
        // independent Simpson quadrature of cos(phi) over each cell.
        let n_lat = 120;
        let grid = GridSpec::new(n_lat, 240, -89.25, 1.5, 1.5).unwrap();
        let w = latitude_weights(&grid).unwrap();
        let row_of = |lat: f64| -> usize {
            (0..n_lat)
                .min_by(|&a, &b| {
                    (grid.lat_deg(a) - lat)
                        .abs()
                        .partial_cmp(&(grid.lat_deg(b) - lat).abs())
                        .unwrap()
                })
                .unwrap()
        };
        // Centers sit at -89.25 + 1.5k: 0.75 and 60.75 are the nearest to 0 and 60.
        let j0 = row_of(0.75);
        let j60 = row_of(60.75);

        // Simpson integration of cos(phi) over a cell, 10001 points.
        let simpson_cos = |center_deg: f64| -> f64 {
            let lo = (center_deg - 0.75).to_radians();
            let hi = (center_deg + 0.75).to_radians();
            let n = 10_000usize; // even
            let h = (hi - lo) / n as f64;
            let mut s = (lo).cos() + (hi).cos();
            for k in 1..n {
                let x = lo + k as f64 * h;
                s += if k % 2 == 1 { 4.0 } else { 2.0 } * x.cos();
            }
            s * h / 3.0
        };
        let oracle_ratio = simpson_cos(grid.lat_deg(j0)) / simpson_cos(grid.lat_deg(j60));
        let impl_ratio = w.get(j0) / w.get(j60);
        assert!(
            (impl_ratio - oracle_ratio).abs() < 1e-9,
            "impl {impl_ratio} vs oracle {oracle_ratio}"
        );
    }

    #[test]
    fn timestamp_index_examples() {
        assert_eq!(timestamp_index(&CalendarTime::new(1, 1, 0).unwrap()), 0);
        assert_eq!(timestamp_index(&CalendarTime::new(12, 31, 23).unwrap()), 8783);
        // Cumulative-day oracle: (31 + 28) * 24 + 12.
        let feb29_noon = CalendarTime::new(2, 29, 12).unwrap();
        let oracle = (31u32 + 28) * 24 + 12;
        assert_eq!(timestamp_index(&feb29_noon), oracle as usize);
        assert_eq!(oracle, 1428);
    }

    #[test]
    fn timestamp_index_is_a_bijection() {
        let mut seen = vec![false; HOURS_PER_YEAR as usize];
        for month in 1..=12u32 {
            for day in 1..=DAYS_IN_MONTH[(month - 1) as usize] {
                for hour in 0..24u32 {
                    let t = CalendarTime::new(month, day, hour).unwrap();
                    let idx = timestamp_index(&t);
                    assert!(!seen[idx], "index {idx} hit twice");
                    seen[idx] = true;
                }
            }
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn invalid_day_for_month_rejected() {
        assert!(CalendarTime::new(2, 30, 0).is_err());
        assert!(CalendarTime::new(4, 31, 0).is_err());
        assert!(CalendarTime::new(2, 29, 0).is_ok());
    }

    #[test]
    fn advance_wraps_year() {
        let t = CalendarTime::new(12, 31, 18).unwrap();
        let t2 = t.advance_steps(1, 6);
        assert!(t2.same_wall_clock(&CalendarTime::new(1, 1, 0).unwrap()));
        assert_eq!(t2.step_index(), 1);
    }

    #[test]
    fn file_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.mrchk");
        let seq = toy_sequence(3, GridSpec::global(6, 8).unwrap());
        write_fields(&seq, &path).unwrap();
        let back = read_fields(&path).unwrap();
        assert_eq!(seq.values, back.values);
        assert_eq!(seq.channel_names, back.channel_names);
        assert_eq!(seq.grid, back.grid);
        assert!(seq.start.same_wall_clock(&back.start));
    }

    #[test]
    fn truncated_payload_is_shape_disagreement() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.mrchk");
        let seq = toy_sequence(2, GridSpec::global(4, 6).unwrap());
        write_fields(&seq, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        match read_fields(&path) {
            Err(Error::ShapeDisagreement { expected, found }) => {
                assert_eq!(found + 1, expected);
            }
            other => panic!("expected shape disagreement, got {other:?}"),
        }
    }

    #[test]
    fn header_t_mismatch_is_error_not_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seq.mrchk");
        // Header says T=2 but payload holds T=3 frames.
        let seq3 = toy_sequence(3, GridSpec::global(4, 6).unwrap());
        let seq2 = seq3.slice_frames(0, 2).unwrap();
        let header = header_text(&seq2);
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        for v in seq3.values.as_slice().unwrap() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_fields(&path),
            Err(Error::ShapeDisagreement { .. })
        ));
    }

    #[test]
    fn bad_magic_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mrchk");
        std::fs::write(&path, b"NOTMAG00000000").unwrap();
        assert!(matches!(read_fields(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn box_mean_constant_field() {
        let grid = GridSpec::global(8, 12).unwrap();
        let mut seq = toy_sequence(1, grid);
        seq.values.fill(3.5);
        let v = box_mean(&seq, 0, 0, (10.0, 50.0), (100.0, 200.0)).unwrap();
        assert!((v - 3.5).abs() < 1e-6);
    }

    #[test]
    fn box_mean_whole_globe_equals_global_weighted_mean() {
        let grid = GridSpec::global(8, 12).unwrap();
        let seq = toy_sequence(1, grid);
        let v = box_mean(&seq, 0, 1, (-90.0, 90.0), (0.0, 360.0)).unwrap();
        let w = latitude_weights(&grid).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..grid.n_lat {
            for i in 0..grid.n_lon {
                num += w.get(j) * seq.values[[0, 1, j, i]] as f64;
                den += w.get(j);
            }
        }
        assert!((v - num / den).abs() < 1e-12);
    }

    #[test]
    fn box_mean_2x2_matches_direct_sum_oracle() {
        let grid = GridSpec::global(8, 12).unwrap();
        let seq = toy_sequence(1, grid);
        // Rows 4,5 have centers 11.25 and 33.75; columns 2,3 centers 60, 90.
        let v = box_mean(&seq, 0, 0, (11.0, 34.0), (59.0, 119.0)).unwrap();
        let w = latitude_weights(&grid).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for j in [4usize, 5] {
            for i in [2usize, 3] {
                num += w.get(j) * seq.values[[0, 0, j, i]] as f64;
                den += w.get(j);
            }
        }
        assert!((v - num / den).abs() < 1e-12);
    }

    #[test]
    fn box_mean_longitude_wrap() {
        let grid = GridSpec::global(4, 8).unwrap();
        let seq = toy_sequence(1, grid);
        // Box spanning the 0 meridian: half-open [315, 405) picks the columns
        // at 315 and 0 but not 45 (= 405).
        let v = box_mean(&seq, 0, 0, (-90.0, 90.0), (315.0, 405.0)).unwrap();
        let w = latitude_weights(&grid).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..4 {
            for i in [7usize, 0] {
                num += w.get(j) * seq.values[[0, 0, j, i]] as f64;
                den += w.get(j);
            }
        }
        assert!((v - num / den).abs() < 1e-12);
    }

    #[test]
    fn box_mean_empty_intersection_errors() {
        let grid = GridSpec::global(8, 12).unwrap();
        let seq = toy_sequence(1, grid);
        assert!(box_mean(&seq, 0, 0, (89.9, 89.95), (0.0, 360.0)).is_err());
    }

    #[test]
    fn static_channel_mismatch_rejected() {
        let grid = GridSpec::global(4, 6).unwrap();
        let mut seq = toy_sequence(2, grid);
        seq.values[[1, 2, 0, 0]] += 1.0;
        let result = FieldSequence::new(
            seq.grid,
            seq.n_channels,
            seq.n_static,
            seq.channel_names.clone(),
            seq.channel_units.clone(),
            seq.start,
            seq.step_hours,
            seq.values.clone(),
        );
        assert!(result.is_err());
    }
}
