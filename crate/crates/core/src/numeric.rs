// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small numeric helpers shared across modules.

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if libm::fabs(self.sum) >= libm::fabs(x) {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// Shannon entropy in nats of a probability vector, with `0·ln 0 := 0`.
pub fn shannon_entropy(p: impl IntoIterator<Item = f64>) -> f64 {
    p.into_iter().filter(|&pi| pi > 0.0).map(|pi| -pi * libm::log(pi)).sum()
}

/// Mean and population standard deviation.
///
/// Deviations are taken from the first element before averaging, so constant
/// input yields exactly `(c, 0)`.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let Some(&shift) = values.first() else {
        return (0.0, 0.0);
    };
    let n = values.len() as f64;
    let offset = values.iter().map(|&v| v - shift).collect::<CompensatedSum>().value() / n;
    let mean = shift + offset;
    let var = values
        .iter()
        .map(|&v| {
            let d = (v - shift) - offset;
            d * d
        })
        .collect::<CompensatedSum>()
        .value()
        / n;
    (mean, libm::sqrt(var))
}

/// Median of a non-empty slice (average of the middle pair for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}
