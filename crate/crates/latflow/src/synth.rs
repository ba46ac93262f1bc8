//! Seeded synthetic atmosphere with learnable structure, plus the climatology
//! builder used for baselines and anomaly references.
//!
//! The generated field is a sum of a seasonal cycle (day-of-year and
//! latitude), a diurnal cycle (hour and longitude), traveling zonal waves,
//! a chaotic Lorenz-96 driver per latitude band, optional localized anomaly
//! events and white noise. Everything is a pure function of the parameters.

use ndarray::{Array1, Array2, Array4};

use crate::error::{Error, Result};
use crate::grid::{CalendarTime, FieldSequence, GridSpec, HOURS_PER_YEAR};
use crate::rng::{derive_seed_tagged, SeedStream};

/// Sites per Lorenz-96 ring.
const L96_SITES: usize = 40;
/// Internal RK4 time step in Lorenz-96 units (fixed by a step-halving study;
/// see `l96_step_halving_matches_oracle`).
const L96_DT: f64 = 0.002;
/// Lorenz-96 time units advanced per output frame at 6-hour stepping.
const L96_UNITS_PER_6H: f64 = 0.05;
/// Burn-in before the first frame, in Lorenz-96 units.
const L96_BURN_IN: f64 = 20.0;

/// A localized additive space-time anomaly (Gaussian in time, lat and lon).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnomalyEvent {
    pub channel: usize,
    /// Absolute step index of the anomaly peak, from generation start.
    pub center_step: i64,
    pub sigma_steps: f64,
    pub center_lat_deg: f64,
    pub center_lon_deg: f64,
    pub sigma_lat_deg: f64,
    pub sigma_lon_deg: f64,
    pub amplitude: f64,
}

impl AnomalyEvent {
    fn value(&self, step: i64, lat_deg: f64, lon_deg: f64) -> f64 {
        let dt = (step - self.center_step) as f64 / self.sigma_steps;
        let dlat = (lat_deg - self.center_lat_deg) / self.sigma_lat_deg;
        let mut dlon = (lon_deg - self.center_lon_deg).rem_euclid(360.0);
        if dlon > 180.0 {
            dlon -= 360.0;
        }
        let dlon = dlon / self.sigma_lon_deg;
        self.amplitude * (-0.5 * (dt * dt + dlat * dlat + dlon * dlon)).exp()
    }
}

/// Parameters of the synthetic atmosphere.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AtmosphereParams {
    pub seed: u64,
    pub n_years: usize,
    pub grid: GridSpec,
    pub n_channels: usize,
    pub step_hours: u32,
    /// Integer zonal wavenumber per traveling wave.
    pub wave_numbers: Vec<u32>,
    /// Phase speed per wave in degrees longitude per 6 hours.
    pub wave_speeds: Vec<f64>,
    pub seasonal_amp: Vec<f64>,
    pub diurnal_amp: Vec<f64>,
    pub wave_amp: Vec<f64>,
    pub chaos_amp: Vec<f64>,
    /// Forcing F of the per-latitude Lorenz-96 driver.
    pub lorenz_forcing: f64,
    pub noise_amp: f64,
    #[serde(default)]
    pub anomalies: Vec<AnomalyEvent>,
}

impl AtmosphereParams {
    /// Desk-scale default: 24x48 grid, 4 dynamic channels + 1 static.
    pub fn default_desk(seed: u64, n_years: usize) -> Self {
        AtmosphereParams {
            seed,
            n_years,
            grid: GridSpec::global(24, 48).expect("desk grid"),
            n_channels: 4,
            step_hours: 6,
            wave_numbers: vec![1, 2],
            // Incommensurate with the year so climatology cannot absorb the waves.
            wave_speeds: vec![3.1, -1.7],
            seasonal_amp: vec![2.0, 1.5, 1.0, 0.8],
            diurnal_amp: vec![0.5, 0.3, 0.6, 0.2],
            wave_amp: vec![1.0, 0.8, 0.6, 1.1],
            chaos_amp: vec![0.25, 0.25, 0.25, 0.25],
            lorenz_forcing: 8.0,
            noise_amp: 0.05,
            anomalies: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_years == 0 {
            return Err(Error::Config("n_years must be >= 1".into()));
        }
        if self.n_channels == 0 {
            return Err(Error::Config("n_channels must be >= 1".into()));
        }
        if self.step_hours == 0 || 24 % self.step_hours != 0 {
            return Err(Error::Config(format!(
                "step_hours {} must divide 24",
                self.step_hours
            )));
        }
        if self.wave_numbers.len() != self.wave_speeds.len() {
            return Err(Error::Config("wave_numbers / wave_speeds length mismatch".into()));
        }
        for (name, amps) in [
            ("seasonal_amp", &self.seasonal_amp),
            ("diurnal_amp", &self.diurnal_amp),
            ("wave_amp", &self.wave_amp),
            ("chaos_amp", &self.chaos_amp),
        ] {
            if amps.len() != self.n_channels {
                return Err(Error::Config(format!(
                    "{name} must have one entry per channel"
                )));
            }
            if amps.iter().any(|&a| a < 0.0 || !a.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        for c in 0..self.n_channels {
            if self.seasonal_amp[c] == 0.0 && self.diurnal_amp[c] == 0.0 && self.wave_amp[c] == 0.0
            {
                return Err(Error::Config(format!(
                    "channel {c} needs at least one of seasonal/diurnal/wave amplitude > 0"
                )));
            }
        }
        if self.noise_amp < 0.0 {
            return Err(Error::Config("noise_amp must be >= 0".into()));
        }
        for a in &self.anomalies {
            if a.channel >= self.n_channels {
                return Err(Error::Config(format!(
                    "anomaly channel {} out of range",
                    a.channel
                )));
            }
            if a.sigma_steps <= 0.0 || a.sigma_lat_deg <= 0.0 || a.sigma_lon_deg <= 0.0 {
                return Err(Error::Config("anomaly sigmas must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn steps_per_day(&self) -> usize {
        (24 / self.step_hours) as usize
    }

    pub fn n_steps(&self) -> usize {
        self.n_years * 366 * self.steps_per_day()
    }

    pub fn channel_names(&self) -> Vec<String> {
        let presets = ["temp", "uwind", "vwind", "slp"];
        let mut names: Vec<String> = (0..self.n_channels)
            .map(|c| {
                presets
                    .get(c)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("ch{c}"))
            })
            .collect();
        names.push("orog".into());
        names
    }

    pub fn channel_units(&self) -> Vec<String> {
        let presets = ["K", "m/s", "m/s", "hPa"];
        let mut units: Vec<String> = (0..self.n_channels)
            .map(|c| {
                presets
                    .get(c)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| "1".into())
            })
            .collect();
        units.push("m".into());
        units
    }
}

/// Lorenz-96 right-hand side on a ring: dx_i = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F.
pub fn lorenz96_rhs(x: &[f64], f: f64, out: &mut [f64]) {
    let n = x.len();
    for i in 0..n {
        let ip1 = (i + 1) % n;
        let im1 = (i + n - 1) % n;
        let im2 = (i + n - 2) % n;
        out[i] = (x[ip1] - x[im2]) * x[im1] - x[i] + f;
    }
}

/// One fixed-step RK4 update of a Lorenz-96 ring.
pub fn l96_rk4_step(x: &mut [f64], f: f64, dt: f64) {
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    lorenz96_rhs(x, f, &mut k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    lorenz96_rhs(&tmp, f, &mut k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    lorenz96_rhs(&tmp, f, &mut k3);
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    lorenz96_rhs(&tmp, f, &mut k4);
    for i in 0..n {
        x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Integrate a ring for `duration` units with fixed step `dt` (the remainder
/// is taken as one shorter step so the endpoint is exact).
pub fn l96_integrate(x: &mut [f64], f: f64, duration: f64, dt: f64) {
    let n_full = (duration / dt).floor() as usize;
    for _ in 0..n_full {
        l96_rk4_step(x, f, dt);
    }
    let rem = duration - n_full as f64 * dt;
    if rem > 1e-12 {
        l96_rk4_step(x, f, rem);
    }
}

/// One Lorenz-96 ring advanced in lockstep with the output frames.
struct ChaosRing {
    state: Vec<f64>,
    forcing: f64,
    units_per_frame: f64,
}

impl ChaosRing {
    fn new(seed: u64, forcing: f64, units_per_frame: f64) -> Self {
        let mut stream = SeedStream::new(seed);
        let mut state: Vec<f64> = (0..L96_SITES)
            .map(|_| forcing + 0.01 * stream.normal())
            .collect();
        l96_integrate(&mut state, forcing, L96_BURN_IN, L96_DT);
        ChaosRing {
            state,
            forcing,
            units_per_frame,
        }
    }

    fn advance_frame(&mut self) {
        l96_integrate(&mut self.state, self.forcing, self.units_per_frame, L96_DT);
    }

    /// Periodic linear interpolation of the ring onto a longitude fraction.
    fn sample(&self, lon_frac: f64) -> f64 {
        let pos = lon_frac.rem_euclid(1.0) * L96_SITES as f64;
        let i0 = pos.floor() as usize % L96_SITES;
        let i1 = (i0 + 1) % L96_SITES;
        let a = pos - pos.floor();
        self.state[i0] * (1.0 - a) + self.state[i1] * a
    }
}

/// Deterministic smooth "orography" static channel: seeded Gaussian bumps.
fn static_channel(grid: &GridSpec, seed: u64) -> Array2<f32> {
    let mut stream = SeedStream::new(derive_seed_tagged(seed, "static"));
    let n_bumps = 4;
    let bumps: Vec<(f64, f64, f64, f64)> = (0..n_bumps)
        .map(|_| {
            let lat = -60.0 + 120.0 * stream.uniform();
            let lon = 360.0 * stream.uniform();
            let sigma = 15.0 + 25.0 * stream.uniform();
            let amp = 0.5 + stream.uniform();
            (lat, lon, sigma, amp)
        })
        .collect();
    let mut out = Array2::<f32>::zeros((grid.n_lat, grid.n_lon));
    for j in 0..grid.n_lat {
        for i in 0..grid.n_lon {
            let lat = grid.lat_deg(j);
            let lon = grid.lon_deg(i);
            let mut v = 0.0;
            for &(blat, blon, sigma, amp) in &bumps {
                let dlat = (lat - blat) / sigma;
                let mut dlon = (lon - blon).rem_euclid(360.0);
                if dlon > 180.0 {
                    dlon -= 360.0;
                }
                let dlon = dlon / sigma;
                v += amp * (-0.5 * (dlat * dlat + dlon * dlon)).exp();
            }
            out[[j, i]] = v as f32;
        }
    }
    out
}

/// Generate the synthetic field sequence described by `params`.
///
/// `value(t, c, y, x) = seasonal + diurnal + waves + chaos + anomalies + noise`,
/// fully reproducible from the seed.
pub fn generate(params: &AtmosphereParams) -> Result<FieldSequence> {
    params.validate()?;
    let grid = params.grid;
    let n_steps = params.n_steps();
    let n_ch = params.n_channels;
    let c_total = n_ch + 1;
    let steps_per_day = params.steps_per_day() as f64;
    let units_per_frame = L96_UNITS_PER_6H * params.step_hours as f64 / 6.0;

    // Seeded per-channel phases for the cycles and waves.
    let mut phase_stream = SeedStream::new(derive_seed_tagged(params.seed, "phases"));
    let seasonal_phase: Vec<f64> = (0..n_ch)
        .map(|_| phase_stream.uniform() * std::f64::consts::TAU)
        .collect();
    let diurnal_phase: Vec<f64> = (0..n_ch)
        .map(|_| phase_stream.uniform() * std::f64::consts::TAU)
        .collect();
    let wave_phase: Vec<Vec<f64>> = (0..n_ch)
        .map(|_| {
            (0..params.wave_numbers.len())
                .map(|_| phase_stream.uniform() * std::f64::consts::TAU)
                .collect()
        })
        .collect();

    // One chaos ring per (latitude band, channel), seeded independently.
    let mut rings: Vec<ChaosRing> = Vec::with_capacity(grid.n_lat * n_ch);
    for band in 0..grid.n_lat {
        for c in 0..n_ch {
            let seed = derive_seed_tagged(params.seed, &format!("l96/{band}/{c}"));
            rings.push(ChaosRing::new(seed, params.lorenz_forcing, units_per_frame));
        }
    }

    let mut noise = SeedStream::new(derive_seed_tagged(params.seed, "noise"));
    let statics = static_channel(&grid, params.seed);

    let start = CalendarTime::new(1, 1, 0)?;
    let mut values = Array4::<f32>::zeros((n_steps, c_total, grid.n_lat, grid.n_lon));

    let lat_rad: Vec<f64> = (0..grid.n_lat).map(|j| grid.lat_deg(j).to_radians()).collect();
    let lon_deg: Vec<f64> = (0..grid.n_lon).map(|i| grid.lon_deg(i)).collect();
    let lon_rad: Vec<f64> = lon_deg.iter().map(|d| d.to_radians()).collect();

    for t in 0..n_steps {
        if t > 0 {
            for ring in rings.iter_mut() {
                ring.advance_frame();
            }
        }
        let time = start.advance_steps(t as i64, params.step_hours);
        let frac_doy = time.day_of_year() as f64 + time.hour() as f64 / 24.0;
        let seasonal_arg = std::f64::consts::TAU * frac_doy / 366.0;
        let hour_frac = time.hour() as f64 / 24.0;

        for c in 0..n_ch {
            for j in 0..grid.n_lat {
                let ring = &rings[j * n_ch + c];
                let seasonal = params.seasonal_amp[c]
                    * (seasonal_arg - seasonal_phase[c]).cos()
                    * lat_rad[j].sin();
                let envelope = lat_rad[j].cos().powi(2);
                for i in 0..grid.n_lon {
                    let diurnal = params.diurnal_amp[c]
                        * (std::f64::consts::TAU * (hour_frac + lon_deg[i] / 360.0)
                            - diurnal_phase[c])
                            .cos();
                    let mut wave = 0.0;
                    for (w, (&k, &speed)) in params
                        .wave_numbers
                        .iter()
                        .zip(params.wave_speeds.iter())
                        .enumerate()
                    {
                        // speed is deg-lon per 6 h; scale to per-step.
                        let omega =
                            k as f64 * (speed * params.step_hours as f64 / 6.0).to_radians();
                        wave += params.wave_amp[c]
                            * (k as f64 * lon_rad[i] - omega * t as f64 + wave_phase[c][w]).sin();
                    }
                    let wave = wave * envelope;
                    let chaos = params.chaos_amp[c] * ring.sample(lon_deg[i] / 360.0);
                    let mut v = seasonal + diurnal + wave + chaos;
                    for a in &params.anomalies {
                        if a.channel == c {
                            v += a.value(t as i64, grid.lat_deg(j), lon_deg[i]);
                        }
                    }
                    if params.noise_amp > 0.0 {
                        v += params.noise_amp * noise.normal();
                    }
                    values[[t, c, j, i]] = v as f32;
                }
            }
        }
        for j in 0..grid.n_lat {
            for i in 0..grid.n_lon {
                values[[t, n_ch, j, i]] = statics[[j, i]];
            }
        }
        // Keep the noise stream position independent of noise_amp == 0 checks:
        // draws above only happen when noise_amp > 0, which is part of params.
        let _ = steps_per_day;
    }

    FieldSequence::new(
        grid,
        n_ch,
        1,
        params.channel_names(),
        params.channel_units(),
        start,
        params.step_hours,
        values,
    )
}

/// Per-(day-of-year, hour-slot) reference means.
#[derive(Debug, Clone)]
pub struct ClimatologyTable {
    pub grid: GridSpec,
    pub n_channels: usize,
    pub n_static: usize,
    pub channel_names: Vec<String>,
    pub channel_units: Vec<String>,
    pub step_hours: u32,
    pub window_days: usize,
    /// Shape `[366 * hours_per_day, C, H, W]`.
    pub means: Array4<f32>,
}

impl ClimatologyTable {
    pub fn hours_per_day(&self) -> usize {
        (24 / self.step_hours) as usize
    }

    /// Slot index for a calendar time (hour must align with the step grid).
    pub fn slot_of(&self, t: &CalendarTime) -> Result<usize> {
        if t.hour() % self.step_hours != 0 {
            return Err(Error::Data(format!(
                "hour {} not on the {}-hour slot grid",
                t.hour(),
                self.step_hours
            )));
        }
        Ok(t.day_of_year() as usize * self.hours_per_day()
            + (t.hour() / self.step_hours) as usize)
    }
}

/// Build the per-slot climatology from training data, averaging over all
/// training years within a circular +/-`window_days` day-of-year window at
/// matching hour.
pub fn build_climatology(train: &FieldSequence, window_days: usize) -> Result<ClimatologyTable> {
    let steps_per_year = (HOURS_PER_YEAR / train.step_hours) as usize;
    if train.n_steps() < steps_per_year {
        return Err(Error::Data(format!(
            "training span {} steps is shorter than one year ({steps_per_year} steps)",
            train.n_steps()
        )));
    }
    let hours_per_day = (24 / train.step_hours) as usize;
    let n_slots = 366 * hours_per_day;
    let c_total = train.total_channels();
    let (_, _, h, w) = train.values.dim();

    // Exact-slot sums and counts.
    let mut slot_sum = Array4::<f64>::zeros((n_slots, c_total, h, w));
    let mut slot_count = Array1::<f64>::zeros(n_slots);
    for t in 0..train.n_steps() {
        let time = train.time_at(t);
        let slot =
            time.day_of_year() as usize * hours_per_day + (time.hour() / train.step_hours) as usize;
        let frame = train.values.index_axis(ndarray::Axis(0), t);
        let mut acc = slot_sum.index_axis_mut(ndarray::Axis(0), slot);
        acc.zip_mut_with(&frame, |a, &v| *a += v as f64);
        slot_count[slot] += 1.0;
    }

    // Circular day-of-year window combine at matching hour.
    let mut means = Array4::<f32>::zeros((n_slots, c_total, h, w));
    let mut window_sum = ndarray::Array3::<f64>::zeros((c_total, h, w));
    for day in 0..366usize {
        for hs in 0..hours_per_day {
            window_sum.fill(0.0);
            let mut count = 0.0;
            for offset in -(window_days as i64)..=(window_days as i64) {
                let d = (day as i64 + offset).rem_euclid(366) as usize;
                let slot = d * hours_per_day + hs;
                if slot_count[slot] > 0.0 {
                    window_sum += &slot_sum.index_axis(ndarray::Axis(0), slot);
                    count += slot_count[slot];
                }
            }
            let slot = day * hours_per_day + hs;
            if count > 0.0 {
                let mut out = means.index_axis_mut(ndarray::Axis(0), slot);
                out.zip_mut_with(&window_sum, |o, &s| *o = (s / count) as f32);
            }
        }
    }

    Ok(ClimatologyTable {
        grid: train.grid,
        n_channels: train.n_channels,
        n_static: train.n_static,
        channel_names: train.channel_names.clone(),
        channel_units: train.channel_units.clone(),
        step_hours: train.step_hours,
        window_days,
        means,
    })
}

/// Deterministic climatology forecast: frames at `start + 1 .. start + n_steps`
/// steps read verbatim from the table slots.
pub fn climatology_forecast(
    table: &ClimatologyTable,
    start: &CalendarTime,
    n_steps: usize,
) -> Result<FieldSequence> {
    if n_steps == 0 {
        return Err(Error::Data("n_steps must be >= 1".into()));
    }
    let c_total = table.n_channels + table.n_static;
    let mut values = Array4::<f32>::zeros((n_steps, c_total, table.grid.n_lat, table.grid.n_lon));
    for i in 0..n_steps {
        let time = start.advance_steps(i as i64 + 1, table.step_hours);
        let slot = table.slot_of(&time)?;
        values
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&table.means.index_axis(ndarray::Axis(0), slot));
    }
    FieldSequence::new(
        table.grid,
        table.n_channels,
        table.n_static,
        table.channel_names.clone(),
        table.channel_units.clone(),
        start.advance_steps(1, table.step_hours),
        table.step_hours,
        values,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params(seed: u64, n_years: usize) -> AtmosphereParams {
        AtmosphereParams {
            seed,
            n_years,
            grid: GridSpec::global(6, 12).unwrap(),
            n_channels: 2,
            step_hours: 6,
            wave_numbers: vec![1],
            wave_speeds: vec![3.1],
            seasonal_amp: vec![1.5, 1.0],
            diurnal_amp: vec![0.4, 0.2],
            wave_amp: vec![0.8, 0.5],
            chaos_amp: vec![0.2, 0.2],
            lorenz_forcing: 8.0,
            noise_amp: 0.02,
            anomalies: Vec::new(),
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let mut p = small_params(7, 1);
        p.n_years = 1;
        let a = generate(&p).unwrap();
        let b = generate(&p).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn harmonic_only_field_is_exactly_periodic() {
        let mut p = small_params(3, 2);
        p.chaos_amp = vec![0.0, 0.0];
        p.noise_amp = 0.0;
        // Wave completing an integer number of cycles per year so the whole
        // field has period exactly one year.
        let steps_per_year = 366.0 * 4.0;
        p.wave_numbers = vec![1];
        p.wave_speeds = vec![2.0 * 360.0 / steps_per_year];
        let seq = generate(&p).unwrap();
        let spy = steps_per_year as usize;
        for t in 0..spy {
            for c in 0..2 {
                let a = seq.values[[t, c, 3, 5]];
                let b = seq.values[[t + spy, c, 3, 5]];
                assert!(
                    (a - b).abs() < 1e-4,
                    "t={t} c={c}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn l96_step_halving_matches_oracle() {
        // Trajectory at t=1 with the production dt matches a half-step RK4
        // oracle within 1e-6 RMS (F=8, 40 sites).
        let mut stream = SeedStream::new(11);
        let init: Vec<f64> = (0..L96_SITES).map(|_| 8.0 + 0.01 * stream.normal()).collect();
        let mut coarse = init.clone();
        let mut fine = init;
        l96_integrate(&mut coarse, 8.0, 1.0, L96_DT);
        l96_integrate(&mut fine, 8.0, 1.0, L96_DT / 2.0);
        let rms = (coarse
            .iter()
            .zip(&fine)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / L96_SITES as f64)
            .sqrt();
        assert!(rms <= 1e-6, "rms {rms}");
    }

    #[test]
    fn l96_state_stays_bounded() {
        let mut stream = SeedStream::new(5);
        let mut x: Vec<f64> = (0..L96_SITES).map(|_| 8.0 + 0.01 * stream.normal()).collect();
        let f = 8.0;
        for _ in 0..2000 {
            l96_integrate(&mut x, f, 0.05, L96_DT);
            for &v in &x {
                assert!(v.abs() <= 4.0 * f, "state {v} escaped [-4F, 4F]");
            }
        }
    }

    #[test]
    fn zonal_mean_removes_diurnal_and_waves() {
        let p = small_params(9, 1);
        let seq = generate(&p).unwrap();
        let mut phase_stream = SeedStream::new(derive_seed_tagged(p.seed, "phases"));
        let seasonal_phase: Vec<f64> = (0..2).map(|_| phase_stream.uniform() * std::f64::consts::TAU).collect();
        // The zonal mean cancels the diurnal and wave harmonics exactly, so
        // what remains beyond the seasonal term is chaos plus noise. The
        // chaos ring mean carries a nonzero offset; center it per band and
        // bound the fluctuation by the amplitude budget.
        let times: Vec<usize> = (0..seq.n_steps()).step_by(17).collect();
        for j in 0..p.grid.n_lat {
            let lat = p.grid.lat_deg(j).to_radians();
            let residuals: Vec<f64> = times
                .iter()
                .map(|&t| {
                    let time = seq.time_at(t);
                    let frac_doy = time.day_of_year() as f64 + time.hour() as f64 / 24.0;
                    let arg = std::f64::consts::TAU * frac_doy / 366.0;
                    let seasonal = p.seasonal_amp[0] * (arg - seasonal_phase[0]).cos() * lat.sin();
                    let mut zonal = 0.0;
                    for i in 0..p.grid.n_lon {
                        zonal += seq.values[[t, 0, j, i]] as f64;
                    }
                    zonal / p.grid.n_lon as f64 - seasonal
                })
                .collect();
            let mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
            let var = residuals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>()
                / residuals.len() as f64;
            // Offset: chaos_amp times the L96 climate mean (about 2.3 at F=8),
            // budgeted as 4 * chaos_amp. Fluctuation: ring-mean std well under
            // 2 * chaos_amp plus the white-noise floor.
            assert!(
                mean.abs() <= 4.0 * p.chaos_amp[0] + p.noise_amp,
                "band {j}: offset {mean}"
            );
            let fluct_bound = 2.0 * p.chaos_amp[0] + p.noise_amp + 1e-9;
            assert!(
                var.sqrt() <= fluct_bound,
                "band {j}: residual std {} exceeds {fluct_bound}",
                var.sqrt()
            );
        }
    }

    #[test]
    fn climatology_of_periodic_data_is_the_field() {
        let mut p = small_params(13, 2);
        p.chaos_amp = vec![0.0, 0.0];
        p.noise_amp = 0.0;
        let steps_per_year = 366.0 * 4.0;
        p.wave_speeds = vec![360.0 / steps_per_year];
        let seq = generate(&p).unwrap();
        let table = build_climatology(&seq, 0).unwrap();
        // Any slot equals the (identical) per-year field value.
        for t in [0usize, 11, 400, 1463] {
            let time = seq.time_at(t);
            let slot = table.slot_of(&time).unwrap();
            for c in 0..2 {
                let a = table.means[[slot, c, 2, 3]];
                let b = seq.values[[t, c, 2, 3]];
                assert!((a - b).abs() < 1e-4, "slot {slot}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn climatology_of_constant_field_is_constant() {
        let grid = GridSpec::global(4, 6).unwrap();
        let t = 366 * 4;
        let mut values = Array4::<f32>::zeros((t, 2, 4, 6));
        values.fill(2.25);
        let seq = FieldSequence::new(
            grid,
            2,
            0,
            vec!["a".into(), "b".into()],
            vec!["1".into(), "1".into()],
            CalendarTime::new(1, 1, 0).unwrap(),
            6,
            values,
        )
        .unwrap();
        let table = build_climatology(&seq, 7).unwrap();
        assert!(table.means.iter().all(|&v| (v - 2.25).abs() < 1e-6));
    }

    #[test]
    fn two_year_window_zero_matches_direct_mean_oracle() {
        let p = small_params(21, 2);
        let seq = generate(&p).unwrap();
        let table = build_climatology(&seq, 0).unwrap();
        let spy = 366 * 4;
        // Direct two-sample mean at a handful of slots.
        for t in [5usize, 123, 999] {
            let direct = 0.5 * (seq.values[[t, 1, 2, 7]] as f64 + seq.values[[t + spy, 1, 2, 7]] as f64);
            let time = seq.time_at(t);
            let slot = table.slot_of(&time).unwrap();
            let got = table.means[[slot, 1, 2, 7]] as f64;
            assert!((got - direct).abs() < 1e-6, "slot {slot}: {got} vs {direct}");
        }
    }

    #[test]
    fn climatology_needs_a_full_year() {
        let p = small_params(2, 1);
        let seq = generate(&p).unwrap();
        let short = seq.slice_frames(0, 100).unwrap();
        assert!(build_climatology(&short, 7).is_err());
    }

    #[test]
    fn climatology_forecast_reads_slots_verbatim() {
        let p = small_params(17, 1);
        let seq = generate(&p).unwrap();
        let table = build_climatology(&seq, 2).unwrap();
        let init = seq.time_at(40);
        let fc = climatology_forecast(&table, &init, 8).unwrap();
        for i in 0..8 {
            let time = fc.time_at(i);
            let slot = table.slot_of(&time).unwrap();
            assert_eq!(
                fc.values.index_axis(ndarray::Axis(0), i),
                table.means.index_axis(ndarray::Axis(0), slot)
            );
        }
    }

    #[test]
    fn climatology_beats_nothing_on_chaotic_data() {
        // With chaos present the climatology has positive error at any lead.
        let p = small_params(23, 2);
        let seq = generate(&p).unwrap();
        let table = build_climatology(&seq, 3).unwrap();
        let init = seq.time_at(600);
        let fc = climatology_forecast(&table, &init, 4).unwrap();
        for i in 0..4 {
            let truth = seq.values.index_axis(ndarray::Axis(0), 601 + i);
            let pred = fc.values.index_axis(ndarray::Axis(0), i);
            let mse: f64 = truth
                .iter()
                .zip(pred.iter())
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum::<f64>();
            assert!(mse > 0.0, "lead {i} unexpectedly perfect");
        }
    }

    #[test]
    fn anomaly_event_adds_local_bump() {
        let mut p = small_params(31, 1);
        p.noise_amp = 0.0;
        let base = generate(&p).unwrap();
        p.anomalies.push(AnomalyEvent {
            channel: 0,
            center_step: 100,
            sigma_steps: 8.0,
            center_lat_deg: 15.0,
            center_lon_deg: 90.0,
            sigma_lat_deg: 20.0,
            sigma_lon_deg: 30.0,
            amplitude: 5.0,
        });
        let bumped = generate(&p).unwrap();
        let diff = bumped.values[[100, 0, 3, 3]] - base.values[[100, 0, 3, 3]];
        assert!(diff > 1.0, "bump missing: {diff}");
        // Far away in time the fields agree.
        let far = (bumped.values[[900, 0, 3, 3]] - base.values[[900, 0, 3, 3]]).abs();
        assert!(far < 1e-4, "far-field perturbed by {far}");
    }
}
