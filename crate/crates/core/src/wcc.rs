//! Windowed cross-correlation (WCC) features over the Q behavioral channels
//! of a video.
//!
//! For a window `[s, s + W)` and channels `i, j`, the correlation at lag `tau`
//! is the Pearson correlation of `x_i[t]` and `x_j[t + tau]` over every `t`
//! with both indices inside the window. Entry `(i, j)` keeps the lagged value
//! of largest magnitude, sign preserved. Lags are visited by increasing
//! `|tau|`, negative before positive, and only a strictly larger magnitude
//! replaces the current value. A segment that is constant has correlation 0.
//!
//! Per-video features are the window matrices flattened row-major (feature
//! `i * Q + j` is the pair `(i, j)`) and averaged over all windows.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CoefficientSeries;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WccConfig {
    pub window_seconds: f64,
    /// Defaults to half a window.
    pub window_stride_seconds: Option<f64>,
    pub lag_range_seconds: f64,
    pub lag_step_frames: usize,
    /// Channel names to keep, in output order. `None` keeps all.
    pub selected_channels: Option<Vec<String>>,
}

impl Default for WccConfig {
    fn default() -> Self {
        WccConfig {
            window_seconds: 4.0,
            window_stride_seconds: None,
            lag_range_seconds: 1.0,
            lag_step_frames: 1,
            selected_channels: None,
        }
    }
}

/// A [`WccConfig`] resolved against a frame rate and channel list.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPlan {
    pub window_frames: usize,
    pub stride_frames: usize,
    pub max_lag_frames: usize,
    /// Lag visiting order: 0, -s, +s, -2s, +2s, ...
    pub lags: Vec<isize>,
    pub channels: Vec<usize>,
    pub channel_names: Vec<String>,
}

impl WindowPlan {
    pub fn required_frames(&self) -> usize {
        self.window_frames
    }

    pub fn window_starts(&self, frame_count: usize) -> Vec<usize> {
        if frame_count < self.window_frames {
            return Vec::new();
        }
        (0..=frame_count - self.window_frames)
            .step_by(self.stride_frames)
            .collect()
    }
}

impl WccConfig {
    pub fn stride_seconds(&self) -> f64 {
        self.window_stride_seconds.unwrap_or(self.window_seconds / 2.0)
    }

    pub fn plan(&self, frame_rate: f64, channel_names: &[String]) -> Result<WindowPlan> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.window_seconds) || !positive(self.stride_seconds()) {
            return Err(Error::config("window length and stride must be positive"));
        }
        if !(self.lag_range_seconds >= 0.0 && self.lag_range_seconds.is_finite()) {
            return Err(Error::config("lag range must be non-negative"));
        }
        if self.lag_step_frames == 0 {
            return Err(Error::config("lag step must be at least one frame"));
        }
        let window_frames = (self.window_seconds * frame_rate).round() as usize;
        let stride_frames = ((self.stride_seconds() * frame_rate).round() as usize).max(1);
        let max_lag_frames = (self.lag_range_seconds * frame_rate).round() as usize;
        if window_frames < 2 {
            return Err(Error::config(format!(
                "window of {} s at {frame_rate} fps is {window_frames} frames; need at least 2",
                self.window_seconds
            )));
        }
        if max_lag_frames >= window_frames {
            return Err(Error::config(format!(
                "lag range of {max_lag_frames} frames must be shorter than the {window_frames}-frame window"
            )));
        }
        let step = self.lag_step_frames as isize;
        let mut lags = vec![0isize];
        let mut m = step;
        while m as usize <= max_lag_frames {
            lags.push(-m);
            lags.push(m);
            m += step;
        }
        let channels = match &self.selected_channels {
            None => (0..channel_names.len()).collect(),
            Some(sel) => sel
                .iter()
                .map(|name| {
                    channel_names
                        .iter()
                        .position(|c| c == name)
                        .ok_or_else(|| Error::config(format!("selected channel {name:?} not present")))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        if channels.is_empty() {
            return Err(Error::config("no channels selected"));
        }
        let names = channels.iter().map(|&c| channel_names[c].clone()).collect();
        Ok(WindowPlan {
            window_frames,
            stride_frames,
            max_lag_frames,
            lags,
            channels,
            channel_names: names,
        })
    }
}

fn is_constant(x: ArrayView1<'_, f64>) -> bool {
    let first = x[0];
    x.iter().all(|&v| v == first)
}

/// Pearson correlation of two equal-length segments; 0 if either is constant.
fn pearson(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    if a.len() < 2 || is_constant(a) || is_constant(b) {
        return 0.0;
    }
    let n = a.len() as f64;
    // Plain sequential sums: ndarray's `sum` unrolls on contiguous data, which
    // would make the result depend on memory layout.
    let ma = a.iter().fold(0.0, |acc, v| acc + v) / n;
    let mb = b.iter().fold(0.0, |acc, v| acc + v) / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b.iter()) {
        let dx = x - ma;
        let dy = y - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Correlation of `x[t]` with `y[t + lag]` over the overlap of both.
fn lagged_pearson(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>, lag: isize) -> f64 {
    let w = x.len();
    let l = lag.unsigned_abs();
    if lag >= 0 {
        pearson(x.slice(s![..w - l]), y.slice(s![l..]))
    } else {
        pearson(x.slice(s![l..]), y.slice(s![..w - l]))
    }
}

/// WCC matrix of a `W x Q` window.
pub fn wcc_matrix(window: ArrayView2<'_, f64>, lags: &[isize]) -> Array2<f64> {
    let q = window.ncols();
    let mut out = Array2::zeros((q, q));
    let live: Vec<bool> = (0..q).map(|c| !is_constant(window.column(c))).collect();
    for i in 0..q {
        if !live[i] {
            continue;
        }
        out[[i, i]] = 1.0;
        for j in 0..q {
            if j == i || !live[j] {
                continue;
            }
            let mut best = 0.0f64;
            for &lag in lags {
                let r = lagged_pearson(window.column(i), window.column(j), lag);
                if r.abs() > best.abs() {
                    best = r;
                }
            }
            out[[i, j]] = best;
        }
    }
    out
}

/// WCC matrix of the window starting at `window_start_frame`.
pub fn window_wcc(series: &CoefficientSeries, cfg: &WccConfig, window_start_frame: usize) -> Result<Array2<f64>> {
    let plan = cfg.plan(series.frame_rate(), &series.channel_names())?;
    let end = window_start_frame + plan.window_frames;
    if end > series.frame_count() {
        return Err(Error::input(format!(
            "window [{window_start_frame}, {end}) exceeds the {} available frames",
            series.frame_count()
        )));
    }
    let data = series.channels();
    let data = data.select(ndarray::Axis(1), &plan.channels);
    Ok(wcc_matrix(data.slice(s![window_start_frame..end, ..]), &plan.lags))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub channel_names: Vec<String>,
    pub window_count: usize,
}

impl FeatureVector {
    pub fn channel_count(&self) -> usize {
        self.channel_names.len()
    }
}

/// Row-major pair order of the flattened features: index `i * Q + j`.
pub fn feature_pairs(channel_names: &[String]) -> Vec<(String, String)> {
    channel_names
        .iter()
        .flat_map(|a| channel_names.iter().map(move |b| (a.clone(), b.clone())))
        .collect()
}

/// Average of the flattened window matrices over every full window.
pub fn video_features(series: &CoefficientSeries, cfg: &WccConfig) -> Result<FeatureVector> {
    let plan = cfg.plan(series.frame_rate(), &series.channel_names())?;
    let starts = plan.window_starts(series.frame_count());
    if starts.is_empty() {
        return Err(Error::input(format!(
            "series has {} frames; at least {} are needed for one window",
            series.frame_count(),
            plan.required_frames()
        )));
    }
    let data = series.channels().select(ndarray::Axis(1), &plan.channels);
    let mats: Vec<Array2<f64>> = starts
        .par_iter()
        .map(|&s0| wcc_matrix(data.slice(s![s0..s0 + plan.window_frames, ..]), &plan.lags))
        .collect();
    let q = plan.channels.len();
    let mut sum = Array1::<f64>::zeros(q * q);
    for m in &mats {
        sum += &Array1::from_iter(m.iter().copied());
    }
    let count = mats.len();
    let values = (sum / count as f64).to_vec();
    Ok(FeatureVector {
        values,
        channel_names: plan.channel_names,
        window_count: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series_from(cols: Vec<Vec<f64>>, fps: f64) -> CoefficientSeries {
        let t = cols[0].len();
        let m = Array2::from_shape_fn((t, cols.len()), |(r, c)| cols[c][r]);
        CoefficientSeries::new(fps, m, None).unwrap()
    }

    fn cfg(window: f64, lag: f64) -> WccConfig {
        WccConfig {
            window_seconds: window,
            lag_range_seconds: lag,
            ..Default::default()
        }
    }

    #[test]
    fn lag_order() {
        let plan = cfg(1.0, 0.3).plan(10.0, &["a".into()]).unwrap();
        assert_eq!(plan.lags, vec![0, -1, 1, -2, 2, -3, 3]);
        let plan = WccConfig { lag_step_frames: 2, ..cfg(1.0, 0.5) }.plan(10.0, &["a".into()]).unwrap();
        assert_eq!(plan.lags, vec![0, -2, 2, -4, 4]);
    }

    #[test]
    fn plan_rejects_bad_configs() {
        let names = vec!["a".to_string()];
        assert!(cfg(0.1, 0.0).plan(10.0, &names).is_err());
        assert!(cfg(1.0, 1.0).plan(10.0, &names).is_err());
        assert!(WccConfig { lag_step_frames: 0, ..cfg(1.0, 0.1) }.plan(10.0, &names).is_err());
        let sel = WccConfig {
            selected_channels: Some(vec!["b".into()]),
            ..cfg(1.0, 0.1)
        };
        assert!(sel.plan(10.0, &names).is_err());
    }

    #[test]
    fn duplicated_channel_correlates_fully() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = series_from(vec![x.clone(), x], 10.0);
        let m = window_wcc(&s, &cfg(2.0, 0.3), 0).unwrap();
        assert!((m[[0, 1]] - 1.0).abs() < 1e-12);
        assert_eq!(m[[0, 0]], 1.0);
    }

    #[test]
    fn constant_channel_row_is_zero() {
        let s = series_from(vec![vec![0.0, 1.0, 3.0, 2.0, 5.0], vec![0.7; 5]], 5.0);
        let m = window_wcc(&s, &cfg(1.0, 0.2), 0).unwrap();
        assert_eq!(m[[1, 1]], 0.0);
        assert_eq!(m[[0, 1]], 0.0);
        assert_eq!(m[[1, 0]], 0.0);
        assert_eq!(m[[0, 0]], 1.0);
    }

    #[test]
    fn window_out_of_bounds() {
        let s = series_from(vec![vec![0.0, 1.0, 2.0, 3.0]], 2.0);
        assert!(window_wcc(&s, &cfg(1.0, 0.0), 2).is_ok());
        assert!(matches!(window_wcc(&s, &cfg(1.0, 0.0), 3), Err(Error::Input(_))));
    }

    #[test]
    fn video_too_short_names_minimum() {
        let s = series_from(vec![vec![0.0, 1.0, 2.0]], 2.0);
        let err = video_features(&s, &cfg(2.0, 0.0)).unwrap_err();
        assert!(err.to_string().contains("at least 4"), "{err}");
    }

    #[test]
    fn single_window_video_equals_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cols: Vec<Vec<f64>> = (0..3).map(|_| (0..12).map(|_| rng.gen()).collect()).collect();
        let s = series_from(cols, 4.0);
        let c = cfg(3.0, 0.5);
        let f = video_features(&s, &c).unwrap();
        assert_eq!(f.window_count, 1);
        let m = window_wcc(&s, &c, 0).unwrap();
        assert_eq!(f.values, m.iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn identical_windows_average_to_either() {
        let base = [0.3, -1.0, 2.0, 0.5, 0.0, 1.5];
        let x: Vec<f64> = base.iter().chain(base.iter()).copied().collect();
        let y: Vec<f64> = x.iter().map(|v| (v * 1.7f64).sin()).collect();
        let s = series_from(vec![x, y], 1.0);
        let c = WccConfig {
            window_stride_seconds: Some(6.0),
            ..cfg(6.0, 2.0)
        };
        let f = video_features(&s, &c).unwrap();
        assert_eq!(f.window_count, 2);
        let m = window_wcc(&s, &c, 0).unwrap();
        for (a, b) in f.values.iter().zip(m.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn pair_names_row_major() {
        let pairs = feature_pairs(&["a".into(), "b".into()]);
        assert_eq!(pairs[1], ("a".to_string(), "b".to_string()));
        assert_eq!(pairs[2], ("b".to_string(), "a".to_string()));
    }
}
