//! Natural cubic spline interpolation for trajectory compilation.

/// Natural cubic spline through `(t, y)` knots. Evaluation outside the knot
/// range extends the boundary polynomial, which keeps the curve C^2 for the
/// finite-difference probes the IMU simulator uses at the domain edges.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    ts: Vec<f64>,
    ys: Vec<f64>,
    /// Second derivatives at the knots (zero at both ends).
    m: Vec<f64>,
}

impl CubicSpline {
    /// Fit a natural spline. Requires at least two strictly increasing knots.
    pub fn natural(ts: &[f64], ys: &[f64]) -> Self {
        assert_eq!(ts.len(), ys.len());
        assert!(ts.len() >= 2, "spline needs at least two knots");
        assert!(
            ts.windows(2).all(|w| w[1] > w[0]),
            "knots must be strictly increasing"
        );
        let n = ts.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior tridiagonal system.
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 1..n - 1 {
                let h0 = ts[i] - ts[i - 1];
                let h1 = ts[i + 1] - ts[i];
                diag[i - 1] = 2.0 * (h0 + h1);
                upper[i - 1] = h1;
                rhs[i - 1] = 6.0 * ((ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0);
            }
            for i in 1..k {
                let lower = ts[i + 1] - ts[i];
                let w = lower / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            let mut sol = vec![0.0; k];
            sol[k - 1] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                sol[i] = (rhs[i] - upper[i] * sol[i + 1]) / diag[i];
            }
            m[1..n - 1].copy_from_slice(&sol);
        }
        Self {
            ts: ts.to_vec(),
            ys: ys.to_vec(),
            m,
        }
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.ts[0], *self.ts.last().unwrap())
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.ts.len();
        let seg = match self.ts.binary_search_by(|k| k.partial_cmp(&t).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        };
        let h = self.ts[seg + 1] - self.ts[seg];
        let s = t - self.ts[seg];
        let (m0, m1) = (self.m[seg], self.m[seg + 1]);
        let b = (self.ys[seg + 1] - self.ys[seg]) / h - h * (2.0 * m0 + m1) / 6.0;
        let c = m0 / 2.0;
        let d = (m1 - m0) / (6.0 * h);
        self.ys[seg] + s * (b + s * (c + s * d))
    }
}
