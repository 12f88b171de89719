//! Perfusion time series and slice extraction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::phantom::{add_noise, render_phantom, PhantomParams, BRAIN, GAP, SKULL};
use crate::tensor::{Float, Tensor};
use crate::{Error, Result};

/// Zero-based index of the time-point used for segmentation (the 4th).
pub const SELECTED_TIMEPOINT: usize = 3;

/// Raw intensities `[T, Z, H, W]` of one subject.
#[derive(Clone, Debug)]
pub struct DscSeries {
    pub subject: String,
    pub data: Tensor<f32>,
}

impl DscSeries {
    pub fn new(subject: impl Into<String>, data: Tensor<f32>) -> Result<Self> {
        if data.ndim() != 4 {
            return Err(Error::Data(format!("a series is [T, Z, H, W], got {:?}", data.shape())));
        }
        Ok(DscSeries { subject: subject.into(), data })
    }

    pub fn timepoints(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn slices(&self) -> usize {
        self.data.shape()[1]
    }
}

/// The 4th time-point of every slice, `[Z, H, W]`.
pub fn select_timepoint(series: &DscSeries) -> Result<Tensor<f32>> {
    let [t, z, h, w]: [usize; 4] = series.data.shape().try_into().expect("rank checked on construction");
    if t <= SELECTED_TIMEPOINT {
        return Err(Error::Data(format!(
            "series {} has {t} time-points; at least {} are needed",
            series.subject,
            SELECTED_TIMEPOINT + 1
        )));
    }
    let volume = z * h * w;
    let start = SELECTED_TIMEPOINT * volume;
    Ok(Tensor::new(&[z, h, w], series.data.data()[start..start + volume].to_vec())?)
}

/// `(x − min) / (max − min)` as `[H, W]`; a constant slice maps to zeros.
pub fn minmax_normalize<T: Float>(values: &[T], height: usize, width: usize) -> Result<Tensor<f32>> {
    if values.len() != height * width {
        return Err(Error::Data(format!("{} values do not form a {height}x{width} slice", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("slice contains non-finite values".into()));
    }
    let (lo, hi) =
        values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.as_f64()), hi.max(v.as_f64())));
    let span = hi - lo;
    let out = values.iter().map(|v| if span > 0.0 { ((v.as_f64() - lo) / span) as f32 } else { 0.0 }).collect();
    Ok(Tensor::new(&[height, width], out)?)
}

/// Relative contrast-agent concentration: a gamma variate starting at 3.5.
fn bolus(t: usize) -> f64 {
    let (t0, tp, alpha) = (3.5, 2.0, 3.0);
    let s = (t as f64 - t0) / tp;
    if s <= 0.0 {
        0.0
    } else {
        s.powf(alpha) * (alpha * (1.0 - s)).exp()
    }
}

/// Synthetic series for one subject plus the per-slice masks `[Z, H, W]`.
/// Each slice is an independent phantom; the signal drops during the bolus
/// passage by a tissue-dependent amount.
pub fn generate_series(
    subject: &str,
    seed: u64,
    timepoints: usize,
    slices: usize,
    height: usize,
    width: usize,
    params: &PhantomParams,
) -> Result<(DscSeries, Tensor<u8>)> {
    if timepoints <= SELECTED_TIMEPOINT || slices == 0 {
        return Err(Error::Config(format!("need at least {} time-points and one slice", SELECTED_TIMEPOINT + 1)));
    }
    let plane = height * width;
    let mut data = vec![0f32; timepoints * slices * plane];
    let mut masks = Vec::with_capacity(slices * plane);
    for z in 0..slices {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(z as u64);
        let phantom = render_phantom(&mut rng, height, width, params)?;
        masks.extend_from_slice(phantom.mask.data());
        for t in 0..timepoints {
            let c = bolus(t);
            let mut frame: Vec<f64> = phantom
                .intensity
                .iter()
                .zip(phantom.regions.data())
                .map(|(&v, &r)| {
                    let k = match r {
                        BRAIN => 0.5,
                        GAP => 0.2,
                        SKULL => 0.05,
                        _ => 0.0,
                    };
                    20.0 + 1000.0 * v * (-k * c).exp()
                })
                .collect();
            add_noise(&mut frame, 1000.0 * params.noise_sd, &mut rng);
            let at = (t * slices + z) * plane;
            for (d, v) in data[at..at + plane].iter_mut().zip(frame) {
                *d = v as f32;
            }
        }
    }
    Ok((
        DscSeries::new(subject, Tensor::new(&[timepoints, slices, height, width], data)?)?,
        Tensor::new(&[slices, height, width], masks)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(t: usize) -> DscSeries {
        let data = Tensor::from_fn(&[t, 2, 2, 2], |i| i as f32).unwrap();
        DscSeries::new("s", data).unwrap()
    }

    #[test]
    fn selects_fourth_timepoint() {
        let s = series(40);
        let sel = select_timepoint(&s).unwrap();
        assert_eq!(sel.shape(), &[2, 2, 2]);
        assert_eq!(sel.data()[0], 24.0);
        // With exactly four time-points the last one is used.
        let s4 = series(4);
        assert_eq!(select_timepoint(&s4).unwrap().data(), &s4.data.data()[24..]);
        assert!(select_timepoint(&series(3)).is_err());
    }

    #[test]
    fn normalization() {
        let v: Vec<f64> = vec![0.0, 255.0, 127.5, 51.0];
        let n = minmax_normalize(&v, 2, 2).unwrap();
        assert_eq!(n.data(), &[0.0, 1.0, 0.5, 0.2]);
        assert_eq!(minmax_normalize(&[3.0f32; 4], 2, 2).unwrap().data(), &[0.0; 4]);
        assert!(minmax_normalize(&[0.0, f64::NAN, 1.0, 2.0], 2, 2).is_err());
        assert!(minmax_normalize(&[0.0f32; 3], 2, 2).is_err());
    }

    #[test]
    fn bolus_leaves_selected_frame_at_baseline() {
        assert_eq!(bolus(SELECTED_TIMEPOINT), 0.0);
        assert!(bolus(5) > 0.5);
    }

    #[test]
    fn generated_series_shapes() {
        let (s, m) = generate_series("a", 1, 6, 3, 32, 32, &PhantomParams::default()).unwrap();
        assert_eq!(s.data.shape(), &[6, 3, 32, 32]);
        assert_eq!(m.shape(), &[3, 32, 32]);
        assert!(generate_series("a", 1, 3, 3, 32, 32, &PhantomParams::default()).is_err());
    }
}
