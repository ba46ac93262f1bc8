//! Positional encodings: temporal rotary embeddings (RoPE), the three-axis
//! rotary variant, and the trainable 2-D spatial embedding table.
//!
//! Rotary schemes rotate adjacent feature pairs by position-proportional
//! angles, so attention logits depend only on relative positions; the
//! spatial table adds one learned row per latent gridpoint.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tape::Real;

/// Rotary configuration. `axis_split` is used by the three-axis variant and
/// must hold even sub-dimensions for (time, lat, lon) summing to `head_dim`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
    pub axis_split: Option<(usize, usize, usize)>,
}

impl RopeConfig {
    pub fn new_1d(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::Config(format!("head_dim {head_dim} must be even")));
        }
        if base <= 1.0 {
            return Err(Error::Config("rope base must exceed 1".into()));
        }
        Ok(RopeConfig {
            head_dim,
            base,
            axis_split: None,
        })
    }

    pub fn new_3d(head_dim: usize, base: f64, split: (usize, usize, usize)) -> Result<Self> {
        let mut cfg = RopeConfig::new_1d(head_dim, base)?;
        let (t, la, lo) = split;
        if t + la + lo != head_dim {
            return Err(Error::Config(format!(
                "axis split {t}+{la}+{lo} != head_dim {head_dim}"
            )));
        }
        if t % 2 != 0 || la % 2 != 0 || lo % 2 != 0 {
            return Err(Error::Config("axis sub-dimensions must be even".into()));
        }
        cfg.axis_split = Some(split);
        Ok(cfg)
    }

    /// Default split for the three-axis variant: half the head dimension for
    /// time, a quarter each for latitude and longitude (rounded to even).
    pub fn default_split(head_dim: usize) -> (usize, usize, usize) {
        let quarter = (head_dim / 4) & !1;
        let lat = quarter.max(2);
        let lon = quarter.max(2);
        (head_dim - lat - lon, lat, lon)
    }
}

fn axis_angles(positions: &[i64], dim: usize, base: f64) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::<f64>::zeros((positions.len(), half));
    for (r, &p) in positions.iter().enumerate() {
        for i in 0..half {
            let freq = base.powf(-2.0 * i as f64 / dim as f64);
            out[[r, i]] = p as f64 * freq;
        }
    }
    out
}

/// Pair rotation angles for 1-D RoPE: `position * base^(-2i/head_dim)`.
pub fn rope_angles(config: &RopeConfig, positions: &[i64]) -> Array2<f64> {
    axis_angles(positions, config.head_dim, config.base)
}

/// Pair rotation angles for the three-axis variant: each axis rotates its own
/// block of feature pairs with frequencies scaled to the block size.
pub fn rope3d_angles(
    config: &RopeConfig,
    time_pos: &[i64],
    lat_pos: &[i64],
    lon_pos: &[i64],
) -> Result<Array2<f64>> {
    let (dt, dlat, dlon) = config
        .axis_split
        .ok_or_else(|| Error::Config("rope3d requires an axis split".into()))?;
    if time_pos.len() != lat_pos.len() || lat_pos.len() != lon_pos.len() {
        return Err(Error::Config("position arrays must have equal length".into()));
    }
    let n = time_pos.len();
    let mut out = Array2::<f64>::zeros((n, config.head_dim / 2));
    let blocks = [(0usize, dt, time_pos), (dt, dlat, lat_pos), (dt + dlat, dlon, lon_pos)];
    for (offset, dim, positions) in blocks {
        let part = axis_angles(positions, dim, config.base);
        out.slice_mut(ndarray::s![.., offset / 2..(offset + dim) / 2])
            .assign(&part);
    }
    Ok(out)
}

fn rotate<T: Real>(vectors: &Array2<T>, angles: &Array2<f64>) -> Array2<T> {
    let (n, d) = vectors.dim();
    assert_eq!(angles.dim(), (n, d / 2));
    let mut out = Array2::<T>::zeros((n, d));
    for r in 0..n {
        for p in 0..d / 2 {
            let (sin, cos) = angles[[r, p]].sin_cos();
            let (sin, cos) = (T::cast_f64(sin), T::cast_f64(cos));
            let a = vectors[[r, 2 * p]];
            let b = vectors[[r, 2 * p + 1]];
            out[[r, 2 * p]] = a * cos - b * sin;
            out[[r, 2 * p + 1]] = a * sin + b * cos;
        }
    }
    out
}

/// Apply 1-D RoPE to row vectors at integer positions. Norm-preserving.
pub fn rope_rotate<T: Real>(
    vectors: &Array2<T>,
    positions: &[i64],
    config: &RopeConfig,
) -> Result<Array2<T>> {
    if vectors.ncols() != config.head_dim {
        return Err(Error::Config(format!(
            "vector width {} != head_dim {}",
            vectors.ncols(),
            config.head_dim
        )));
    }
    if vectors.nrows() != positions.len() {
        return Err(Error::Config("one position per vector required".into()));
    }
    Ok(rotate(vectors, &rope_angles(config, positions)))
}

/// Apply three-axis RoPE: each axis rotates its own sub-dimension block.
pub fn rope3d_rotate<T: Real>(
    vectors: &Array2<T>,
    time_pos: &[i64],
    lat_pos: &[i64],
    lon_pos: &[i64],
    config: &RopeConfig,
) -> Result<Array2<T>> {
    if vectors.ncols() != config.head_dim {
        return Err(Error::Config(format!(
            "vector width {} != head_dim {}",
            vectors.ncols(),
            config.head_dim
        )));
    }
    Ok(rotate(
        vectors,
        &rope3d_angles(config, time_pos, lat_pos, lon_pos)?,
    ))
}

/// Trainable per-gridpoint embedding rows added to token features once per
/// frame.
#[derive(Debug, Clone)]
pub struct SpatialEmbedTable<T> {
    pub table: Array2<T>,
}

impl<T: Real> SpatialEmbedTable<T> {
    pub fn new(table: Array2<T>) -> Self {
        SpatialEmbedTable { table }
    }

    pub fn n_sites(&self) -> usize {
        self.table.nrows()
    }

    /// Add row `s` of the table to every token at spatial slot `s` of each
    /// frame. Tokens are time-major: `tokens[f * S + s]`.
    pub fn apply(&self, tokens: &Array2<T>) -> Result<Array2<T>> {
        let s = self.n_sites();
        if tokens.ncols() != self.table.ncols() || tokens.nrows() % s != 0 {
            return Err(Error::Config(format!(
                "token shape {:?} incompatible with table {:?}",
                tokens.dim(),
                self.table.dim()
            )));
        }
        let n_frames = tokens.nrows() / s;
        let mut out = tokens.clone();
        for f in 0..n_frames {
            let mut block = out.slice_mut(ndarray::s![f * s..(f + 1) * s, ..]);
            block += &self.table;
        }
        Ok(out)
    }
}
