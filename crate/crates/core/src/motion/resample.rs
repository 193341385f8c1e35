//! Linear-interpolation frame-rate conversion.

use nalgebra::Vector3;

use super::codec::JointPositions;
use crate::error::{Error, Result};

/// Output frame count and the source-frame position of output frame `k`.
///
/// The grid keeps both endpoints: `n_out = round((n-1) dst/src) + 1` frames
/// spaced `(n-1)/(n_out-1)` source frames apart, which is exactly
/// `src/dst` whenever the clip duration lands on the target grid.
fn grid(n: usize, src_fps: f64, dst_fps: f64) -> (usize, f64) {
    let n_out = ((n - 1) as f64 * dst_fps / src_fps).round() as usize + 1;
    let step = if n_out > 1 {
        (n - 1) as f64 / (n_out - 1) as f64
    } else {
        0.0
    };
    (n_out, step)
}

fn check(n: usize, src_fps: f64, dst_fps: f64) -> Result<()> {
    if !(src_fps > 0.0 && dst_fps > 0.0) {
        return Err(Error::invalid("frame rates must be positive"));
    }
    if n < 2 {
        return Err(Error::invalid(format!("resampling needs at least 2 frames, got {n}")));
    }
    Ok(())
}

/// Resamples row-major `frames × width` data; returns the new frame count.
pub fn resample_rows(data: &[f64], frames: usize, width: usize, src_fps: f64, dst_fps: f64) -> Result<(Vec<f64>, usize)> {
    check(frames, src_fps, dst_fps)?;
    if data.len() != frames * width {
        return Err(Error::shape("resample", &[frames, width], &[data.len()]));
    }
    let (n_out, step) = grid(frames, src_fps, dst_fps);
    let mut out = Vec::with_capacity(n_out * width);
    for k in 0..n_out {
        if k + 1 == n_out {
            out.extend_from_slice(&data[(frames - 1) * width..]);
            continue;
        }
        let pos = k as f64 * step;
        let i = (pos.floor() as usize).min(frames - 2);
        let frac = pos - i as f64;
        let (a, b) = (&data[i * width..(i + 1) * width], &data[(i + 1) * width..(i + 2) * width]);
        if frac == 0.0 {
            out.extend_from_slice(a);
        } else {
            out.extend(a.iter().zip(b).map(|(x, y)| x + (y - x) * frac));
        }
    }
    Ok((out, n_out))
}

/// Linear interpolation of every joint coordinate and the root yaw.
pub fn resample_fps(positions: &JointPositions, src_fps: f64, dst_fps: f64) -> Result<JointPositions> {
    let n = positions.len();
    check(n, src_fps, dst_fps)?;
    let j = positions.joint_count();
    let width = 3 * j + 1;
    let mut flat = Vec::with_capacity(n * width);
    for (f, &yaw) in positions.frames.iter().zip(&positions.root_yaw) {
        for p in f {
            flat.extend_from_slice(p.as_slice());
        }
        flat.push(yaw);
    }
    let (out, n_out) = resample_rows(&flat, n, width, src_fps, dst_fps)?;
    let mut frames = Vec::with_capacity(n_out);
    let mut yaws = Vec::with_capacity(n_out);
    for row in out.chunks(width) {
        frames.push(row[..3 * j].chunks(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect());
        yaws.push(row[3 * j]);
    }
    JointPositions::new(dst_fps, frames, yaws)
}
