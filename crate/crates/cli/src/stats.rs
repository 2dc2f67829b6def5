use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Sample mean with the half-width of a two-sided 95% Student-t interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub ci95: f64,
    pub values: Vec<f64>,
}

impl MeanCi {
    /// The interval is 0 for a single value.
    pub fn of(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "need at least one value");
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let ci95 = if values.len() < 2 {
            0.0
        } else {
            let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let t = StudentsT::new(0.0, 1.0, n - 1.0).expect("dof > 0").inverse_cdf(0.975);
            t * (var / n).sqrt()
        };
        MeanCi { mean, ci95, values: values.to_vec() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_has_zero_width() {
        assert_eq!(MeanCi::of(&[0.7]), MeanCi { mean: 0.7, ci95: 0.0, values: vec![0.7] });
    }

    #[test]
    fn five_values_use_t4() {
        // t_{0.975, 4} = 2.7764451...
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        let m = MeanCi::of(&v);
        assert_eq!(m.mean, 3.0);
        let want = 2.776_445_105_197_799 * (2.5f64 / 5.0).sqrt();
        assert!((m.ci95 - want).abs() < 1e-9, "{}", m.ci95);
    }

    #[test]
    fn constant_values_have_zero_width() {
        assert_eq!(MeanCi::of(&[2.0, 2.0, 2.0]).ci95, 0.0);
    }
}
