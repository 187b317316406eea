//! Flow preprocessing: canonical normalization, 20-channel stacking, the
//! binary cache, and the diagnostic HSV rendering.
//!
//! Displacements are clipped to ±20 px and rescaled to `[0, 255]`, then ten
//! consecutive-pair fields are interleaved as `[u0, v0, ..., u9, v9]`. The
//! stack is stored pre-centering with byte-quantized values so the cache
//! round-trips bit-exactly; zero-centering (subtract 127.5) happens at load.

pub mod farneback;

use std::path::Path;

use thiserror::Error;

pub use farneback::{estimate_flow, FarnebackError, FarnebackParams, FlowField};

use crate::imageops::Frame;
use crate::npy::{self, NpyError};
use crate::videoio::SampledClip;

/// Channel count of the stack: `u` and `v` for each of the ten pairs.
pub const STACK_CHANNELS: usize = 20;
/// Number of frame pairs feeding the stack.
pub const STACK_PAIRS: usize = 10;
/// Clipping threshold of the canonical normalization, in pixels.
pub const CLIP_PIXELS: f64 = 20.0;
/// Zero-centering offset.
pub const CENTER_OFFSET: f32 = 127.5;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Farneback(#[from] FarnebackError),
    #[error("stack is already centered")]
    AlreadyCentered,
    #[error("stack must be uncentered for this operation")]
    NotCentered,
    #[error("corrupt cache at {path}: {reason}")]
    CorruptCache { path: String, reason: String },
    #[error("clip has {0} frames; the stack needs at least 2")]
    NotEnoughFrames(usize),
}

/// The 20-channel normalized displacement stack for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowStack {
    /// Spatial side length; channels are `side * side` each.
    pub side: usize,
    /// `STACK_CHANNELS * side * side`, channel-major.
    /// Uncentered values are byte-quantized floats in `[0, 255]`.
    pub channels: Vec<f32>,
    pub centered: bool,
}

impl FlowStack {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.side * self.side;
        &self.channels[c * n..(c + 1) * n]
    }

    /// Test/support constructor for raw (already normalized) values.
    pub fn from_raw(side: usize, channels: Vec<f32>, centered: bool) -> Self {
        assert_eq!(channels.len(), STACK_CHANNELS * side * side);
        Self {
            side,
            channels,
            centered,
        }
    }
}

/// Canonical normalization of one displacement value:
/// `(clip(o, -20, 20) + 20) / 40 * 255`.
#[inline]
pub fn normalize_value(o: f64) -> f64 {
    (o.clamp(-CLIP_PIXELS, CLIP_PIXELS) + CLIP_PIXELS) / (2.0 * CLIP_PIXELS) * 255.0
}

/// Applies the canonical normalization to both displacement maps.
pub fn normalize_flow(field: &FlowField) -> (Vec<f32>, Vec<f32>) {
    let norm = |vals: &[f32]| {
        vals.iter()
            .map(|&o| normalize_value(f64::from(o)) as f32)
            .collect()
    };
    (norm(&field.u), norm(&field.v))
}

/// Start indices of the K consecutive pairs drawn uniformly from N frames:
/// `round(i * (N-2) / (K-1))`, so pair i covers frames (p_i, p_i + 1).
pub fn pair_start_indices(num_frames: usize, num_pairs: usize) -> Vec<usize> {
    assert!(num_frames >= 2 && num_pairs >= 1);
    if num_pairs == 1 {
        return vec![0];
    }
    (0..num_pairs)
        .map(|i| {
            let f = i as f64 * (num_frames as f64 - 2.0) / (num_pairs as f64 - 1.0);
            f.round() as usize
        })
        .collect()
}

/// Estimates, normalizes and interleaves the ten pair flows of a clip.
///
/// Values are quantized to whole byte levels here so that the persisted cache
/// and the in-memory stack agree exactly.
pub fn build_flow_stack(
    sampled: &SampledClip,
    params: &FarnebackParams,
) -> Result<FlowStack, FlowError> {
    if sampled.frames.len() < 2 {
        return Err(FlowError::NotEnoughFrames(sampled.frames.len()));
    }
    let side = sampled.frames[0].width;
    let starts = pair_start_indices(sampled.frames.len(), STACK_PAIRS);
    let grays: Vec<_> = sampled.frames.iter().map(Frame::to_luma).collect();

    let mut channels = vec![0.0f32; STACK_CHANNELS * side * side];
    let n = side * side;
    for (i, &p) in starts.iter().enumerate() {
        let flow = estimate_flow(&grays[p], &grays[p + 1], params)?;
        let (u, v) = normalize_flow(&flow);
        for (dst, src) in channels[2 * i * n..(2 * i + 1) * n].iter_mut().zip(&u) {
            *dst = src.round().clamp(0.0, 255.0);
        }
        for (dst, src) in channels[(2 * i + 1) * n..(2 * i + 2) * n].iter_mut().zip(&v) {
            *dst = src.round().clamp(0.0, 255.0);
        }
    }

    Ok(FlowStack {
        side,
        channels,
        centered: false,
    })
}

/// Zero-centers a stack by subtracting 127.5 from every value.
pub fn center_stack(stack: &FlowStack) -> Result<FlowStack, FlowError> {
    if stack.centered {
        return Err(FlowError::AlreadyCentered);
    }
    Ok(FlowStack {
        side: stack.side,
        channels: stack.channels.iter().map(|v| v - CENTER_OFFSET).collect(),
        centered: true,
    })
}

/// Persists an uncentered stack as a `|u1` NPY of shape (20, S, S).
pub fn cache_write(stack: &FlowStack, path: &Path) -> Result<(), FlowError> {
    if stack.centered {
        return Err(FlowError::NotCentered);
    }
    let bytes: Vec<u8> = stack.channels.iter().map(|&v| v as u8).collect();
    npy::write(path, &[STACK_CHANNELS, stack.side, stack.side], &bytes).map_err(|e| {
        FlowError::CorruptCache {
            path: path.display().to_string(),
            reason: e.to_string(),
        }
    })
}

/// Loads a cached stack, validating dtype and the (20, side, side) shape.
pub fn cache_read(path: &Path, side: usize) -> Result<FlowStack, FlowError> {
    let corrupt = |reason: String| FlowError::CorruptCache {
        path: path.display().to_string(),
        reason,
    };
    let (shape, data) = npy::read::<u8>(path).map_err(|e| match e {
        NpyError::Io(io) => FlowError::CorruptCache {
            path: path.display().to_string(),
            reason: format!("io: {io}"),
        },
        other => FlowError::CorruptCache {
            path: path.display().to_string(),
            reason: other.to_string(),
        },
    })?;
    let expected = vec![STACK_CHANNELS, side, side];
    if shape != expected {
        return Err(corrupt(format!(
            "shape {shape:?}, expected {expected:?}"
        )));
    }
    Ok(FlowStack {
        side,
        channels: data.into_iter().map(f32::from).collect(),
        centered: false,
    })
}

/// Renders a flow field as an HSV image: hue encodes direction, brightness
/// encodes magnitude. Diagnostic output only.
pub fn flow_to_hsv(field: &FlowField) -> Frame {
    let max_mag = field
        .u
        .iter()
        .zip(&field.v)
        .map(|(&u, &v)| (u * u + v * v).sqrt())
        .fold(1e-6f32, f32::max);
    let mut frame = Frame::new(field.width, field.height);
    for y in 0..field.height {
        for x in 0..field.width {
            let i = y * field.width + x;
            let (u, v) = (field.u[i], field.v[i]);
            let angle = v.atan2(u); // [-pi, pi]
            let hue = (angle + std::f32::consts::PI) / (2.0 * std::f32::consts::PI) * 360.0;
            let value = ((u * u + v * v).sqrt() / max_mag).clamp(0.0, 1.0);
            frame.set_pixel(x, y, hsv_to_rgb(hue, 1.0, value));
        }
    }
    frame
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [u8; 3] {
    let c = v * s;
    let hp = (h / 60.0) % 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalization_fixed_points() {
        assert_eq!(normalize_value(0.0), 127.5);
        assert_eq!(normalize_value(-30.0), 0.0);
        assert_eq!(normalize_value(-20.0), 0.0);
        assert_eq!(normalize_value(20.0), 255.0);
        assert_eq!(normalize_value(30.0), 255.0);
        assert_eq!(normalize_value(10.0), 191.25);
    }

    #[test]
    fn pairing_formula_16_frames() {
        // round(i * 14 / 9) evaluated by hand
        assert_eq!(
            pair_start_indices(16, 10),
            vec![0, 2, 3, 5, 6, 8, 9, 11, 12, 14]
        );
    }

    #[test]
    fn centering_round_values() {
        let stack = FlowStack::from_raw(1, {
            let mut v = vec![0.0f32; 20];
            v[0] = 127.5;
            v[1] = 255.0;
            v[2] = 0.0;
            v
        }, false);
        let centered = center_stack(&stack).unwrap();
        assert_eq!(centered.channels[0], 0.0);
        assert_eq!(centered.channels[1], 127.5);
        assert_eq!(centered.channels[2], -127.5);
        assert!(matches!(
            center_stack(&centered),
            Err(FlowError::AlreadyCentered)
        ));
    }

    #[test]
    fn cache_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.npy");
        let side = 6;
        let channels: Vec<f32> = (0..STACK_CHANNELS * side * side)
            .map(|i| (i % 256) as f32)
            .collect();
        let stack = FlowStack::from_raw(side, channels, false);
        cache_write(&stack, &path).unwrap();
        let back = cache_read(&path, side).unwrap();
        assert_eq!(back, stack);
    }

    #[test]
    fn cache_rejects_wrong_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.npy");
        crate::npy::write(&path, &[10, 4, 4], &vec![0u8; 160]).unwrap();
        assert!(matches!(
            cache_read(&path, 4),
            Err(FlowError::CorruptCache { .. })
        ));
    }

    #[test]
    fn cache_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.npy");
        let stack = FlowStack::from_raw(4, vec![1.0; STACK_CHANNELS * 16], false);
        cache_write(&stack, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(cache_read(&path, 4).is_err());
    }

    #[test]
    fn centered_stack_cannot_be_cached() {
        let stack = FlowStack::from_raw(1, vec![0.0; 20], true);
        assert!(matches!(
            cache_write(&stack, Path::new("/tmp/never.npy")),
            Err(FlowError::NotCentered)
        ));
    }

    #[test]
    fn static_clip_gives_midpoint_channels() {
        let mut frame = crate::imageops::Frame::new(32, 32);
        for (i, v) in frame.data.iter_mut().enumerate() {
            *v = ((i * 31 + i / 96) % 251) as u8;
        }
        let sampled = crate::videoio::SampledClip {
            frames: vec![frame; 16],
            middle_index: 8,
            sample_indices: (0..16).collect(),
        };
        let stack = build_flow_stack(&sampled, &FarnebackParams::default()).unwrap();
        for c in 0..STACK_CHANNELS {
            let mean: f64 = stack.channel(c).iter().map(|&v| f64::from(v)).sum::<f64>()
                / (32.0 * 32.0);
            assert!((mean - 127.5).abs() < 2.0, "channel {c} mean {mean}");
        }
        assert!(!stack.centered);
    }

    proptest! {
        #[test]
        fn normalize_in_range_and_monotone(a in -100.0f64..100.0, b in -100.0f64..100.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (na, nb) = (normalize_value(lo), normalize_value(hi));
            prop_assert!((0.0..=255.0).contains(&na));
            prop_assert!((0.0..=255.0).contains(&nb));
            prop_assert!(na <= nb);
        }

        #[test]
        fn normalize_symmetry(o in -20.0f64..=20.0) {
            let s = normalize_value(o) + normalize_value(-o);
            prop_assert!((s - 255.0).abs() < 1e-9);
        }
    }
}
