//! Small statistics helpers for ensemble estimators.

/// Running mean and variance (Welford), mergeable across workers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    pub n: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&self, other: &Moments) -> Moments {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * other.n as f64 / n as f64;
        let m2 = self.m2 + other.m2 + delta * delta * (self.n as f64 * other.n as f64) / n as f64;
        Moments { n, mean, m2 }
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.mean
        }
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            f64::NAN
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn std_err(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }
}

impl FromIterator<f64> for Moments {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut m = Moments::new();
        for x in iter {
            m.push(x);
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
}

impl Estimate {
    /// |value − target| in units of the standard error.
    pub fn z_score(&self, target: f64) -> f64 {
        (self.value - target).abs() / self.std_err
    }

    pub fn within(&self, target: f64, n_se: f64) -> bool {
        (self.value - target).abs() <= n_se * self.std_err
    }
}

pub fn mean_se(xs: &[f64]) -> Estimate {
    let m: Moments = xs.iter().copied().collect();
    Estimate { value: m.mean(), std_err: m.std_err() }
}

/// Delete-a-group jackknife of `stat` over `groups` contiguous blocks.
pub fn jackknife<F>(xs: &[f64], groups: usize, stat: F) -> Estimate
where
    F: Fn(&[f64]) -> f64,
{
    let n = xs.len();
    let g = groups.clamp(2, n.max(2));
    let full = stat(xs);
    if n < 2 {
        return Estimate { value: full, std_err: f64::NAN };
    }
    let mut leave_out = Vec::with_capacity(g);
    let mut buf = Vec::with_capacity(n);
    for k in 0..g {
        let lo = k * n / g;
        let hi = (k + 1) * n / g;
        buf.clear();
        buf.extend_from_slice(&xs[..lo]);
        buf.extend_from_slice(&xs[hi..]);
        leave_out.push(stat(&buf));
    }
    let mean_lo = leave_out.iter().sum::<f64>() / g as f64;
    let var = leave_out.iter().map(|v| (v - mean_lo).powi(2)).sum::<f64>() * (g - 1) as f64 / g as f64;
    Estimate { value: g as f64 * full - (g - 1) as f64 * mean_lo, std_err: var.sqrt() }
}

/// Weighted least-squares line y = a + b·x; returns (slope estimate, intercept).
pub fn weighted_line_fit(x: &[f64], y: &[f64], w: &[f64]) -> (Estimate, f64) {
    let sw: f64 = w.iter().sum();
    let sx: f64 = x.iter().zip(w).map(|(x, w)| w * x).sum();
    let sy: f64 = y.iter().zip(w).map(|(y, w)| w * y).sum();
    let sxx: f64 = x.iter().zip(w).map(|(x, w)| w * x * x).sum();
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((x, y), w)| w * x * y).sum();
    let det = sw * sxx - sx * sx;
    let slope = (sw * sxy - sx * sy) / det;
    let intercept = (sxx * sy - sx * sxy) / det;
    (Estimate { value: slope, std_err: (sw / det).sqrt() }, intercept)
}

/// Weighted fit through the origin y = b·x with weights w (inverse variances).
pub fn fit_through_origin(x: &[f64], y: &[f64], w: &[f64]) -> Estimate {
    let sxx: f64 = x.iter().zip(w).map(|(x, w)| w * x * x).sum();
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((x, y), w)| w * x * y).sum();
    Estimate { value: sxy / sxx, std_err: (1.0 / sxx).sqrt() }
}
