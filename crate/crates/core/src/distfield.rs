//! Per-instance distance fields and seed extraction.
//!
//! The distance transform runs the two-pass lower-envelope algorithm on
//! squared integer distances with exact rational comparisons, so results
//! match a brute-force nearest-pixel scan bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use crate::datagen::LabelMap;
use crate::error::{Error, Result};

/// Per-pixel normalized distance to the nearest pixel outside the owning
/// instance. Background is exactly 0; each instance's maximum is exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DistMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DistMap {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// One thresholded local maximum of a distance map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Seed {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

const INF: i64 = 1 << 40;

/// 1-D squared-distance lower envelope of parabolas rooted at `f`.
/// Interval boundaries are kept as exact rationals (num/den, den > 0) and
/// compared by cross-multiplication, so no selection ever depends on
/// floating-point rounding.
fn dt1d(f: &[i64], d: &mut [i64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut zn = vec![0i64; n + 1];
    let mut zd = vec![1i64; n + 1];
    let mut k = 0usize;
    zn[0] = -INF;
    zn[1] = INF;
    for q in 1..n {
        let mut s_num;
        let mut s_den;
        loop {
            let p = v[k];
            s_num = (f[q] + (q * q) as i64) - (f[p] + (p * p) as i64);
            s_den = 2 * (q as i64 - p as i64);
            if (s_num as i128) * (zd[k] as i128) <= (zn[k] as i128) * (s_den as i128) {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        zn[k] = s_num;
        zd[k] = s_den;
        zn[k + 1] = INF;
        zd[k + 1] = 1;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate().take(n) {
        while (zn[k + 1] as i128) < (q as i128) * (zd[k + 1] as i128) {
            k += 1;
        }
        let p = v[k];
        let dq = q as i64 - p as i64;
        *out = dq * dq + f[p];
    }
}

/// Exact squared Euclidean distance from every cell to the nearest site.
fn squared_edt(sites: &[bool], height: usize, width: usize) -> Vec<i64> {
    let mut tmp = vec![0i64; height * width];
    let side = height.max(width);
    let mut f = vec![0i64; side];
    let mut d = vec![0i64; side];
    for r in 0..height {
        for c in 0..width {
            f[c] = if sites[r * width + c] { 0 } else { INF };
        }
        dt1d(&f[..width], &mut d[..width]);
        tmp[r * width..(r + 1) * width].copy_from_slice(&d[..width]);
    }
    let mut out = vec![0i64; height * width];
    for c in 0..width {
        for r in 0..height {
            f[r] = tmp[r * width + c];
        }
        dt1d(&f[..height], &mut d[..height]);
        for r in 0..height {
            out[r * width + c] = d[r];
        }
    }
    out
}

/// Builds the ground-truth distance map: for each pixel of instance c, the
/// Euclidean distance to the nearest pixel not belonging to c, divided by the
/// instance-wise maximum of that distance.
pub fn compute_distmap(labels: &LabelMap) -> DistMap {
    let (h, w) = (labels.height, labels.width);
    let mut values = vec![0.0f64; h * w];
    for id in 1..=labels.num_instances() {
        let sites: Vec<bool> = labels.ids.iter().map(|&v| v != id).collect();
        if sites.iter().all(|&s| !s) {
            // instance covers the raster; no outside pixel exists, so the
            // whole plateau sits at the normalized maximum
            values.iter_mut().for_each(|v| *v = 1.0);
            continue;
        }
        let sq = squared_edt(&sites, h, w);
        let mut max_sq = 0i64;
        for (i, &v) in labels.ids.iter().enumerate() {
            if v == id && sq[i] > max_sq {
                max_sq = sq[i];
            }
        }
        assert!(max_sq >= 1, "instance pixels sit at distance >= 1 from outside");
        let max_d = (max_sq as f64).sqrt();
        for (i, &v) in labels.ids.iter().enumerate() {
            if v == id {
                values[i] = (sq[i] as f64).sqrt() / max_d;
            }
        }
    }
    DistMap {
        height: h,
        width: w,
        values,
    }
}

/// Finds local maxima of a distance map within a `(2*window+1)^2`
/// neighborhood whose value reaches `threshold_frac` of the global maximum.
/// Plateau ties go to the row-major first pixel, so two seeds can never sit
/// within one window of each other. Output is ordered by descending value,
/// then row-major position.
pub fn extract_seeds(dist: &DistMap, threshold_frac: f64, window: usize) -> Result<Vec<Seed>> {
    if !(threshold_frac > 0.0 && threshold_frac <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "threshold_frac must be in (0,1], got {threshold_frac}"
        )));
    }
    if window < 1 {
        return Err(Error::InvalidConfig("seed window must be >= 1".into()));
    }
    let (h, w) = (dist.height, dist.width);
    let gmax = dist.values.iter().cloned().fold(0.0f64, f64::max);
    if gmax <= 0.0 {
        return Ok(Vec::new());
    }
    let thr = threshold_frac * gmax;
    let mut seeds = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = dist.get(r, c);
            if v < thr {
                continue;
            }
            let r_lo = r.saturating_sub(window);
            let r_hi = (r + window).min(h - 1);
            let c_lo = c.saturating_sub(window);
            let c_hi = (c + window).min(w - 1);
            let mut is_seed = true;
            'scan: for qr in r_lo..=r_hi {
                for qc in c_lo..=c_hi {
                    if qr == r && qc == c {
                        continue;
                    }
                    let q = dist.get(qr, qc);
                    if q > v || (q == v && (qr, qc) < (r, c)) {
                        is_seed = false;
                        break 'scan;
                    }
                }
            }
            if is_seed {
                seeds.push(Seed { row: r, col: c, value: v });
            }
        }
    }
    seeds.sort_by(|a, b| {
        b.value
            .partial_cmp(&a.value)
            .expect("distance values are finite")
            .then_with(|| (a.row, a.col).cmp(&(b.row, b.col)))
    });
    Ok(seeds)
}

/// Writes a distance map as an 8-byte header (height, width as little-endian
/// u32) followed by the row-major raster as little-endian f32.
pub fn save_distmap(dist: &DistMap, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + dist.values.len() * 4);
    buf.extend_from_slice(&(dist.height as u32).to_le_bytes());
    buf.extend_from_slice(&(dist.width as u32).to_le_bytes());
    for &v in &dist.values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_distmap(path: impl AsRef<Path>) -> Result<DistMap> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(Error::Format(format!(
            "{}: distance-map file shorter than its 8-byte header",
            path.display()
        )));
    }
    let height = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + height * width * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} bytes for a {height}x{width} raster, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(height * width);
    for chunk in bytes[8..].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(Error::Format(format!(
                "{}: non-finite distance value",
                path.display()
            )));
        }
        values.push(v);
    }
    Ok(DistMap {
        height,
        width,
        values,
    })
}
