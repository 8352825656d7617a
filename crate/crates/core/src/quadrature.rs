//! Adaptive Simpson quadrature over a panel grid.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub value: f64,
    pub error_estimate: f64,
    pub evaluations: usize,
    /// The integrand returned a non-finite value somewhere.
    pub non_finite: bool,
    /// The evaluation budget ran out before the tolerance was met.
    pub exhausted: bool,
}

const MAX_DEPTH: u32 = 48;
/// Evaluation budget per call.
pub const MAX_EVALUATIONS: usize = 2_000_000;

struct State<'a, F> {
    f: &'a F,
    evaluations: usize,
    non_finite: bool,
    exhausted: bool,
    error: f64,
}

impl<F: Fn(f64) -> f64> State<'_, F> {
    fn eval(&mut self, x: f64) -> f64 {
        self.evaluations += 1;
        let v = (self.f)(x);
        if !v.is_finite() {
            self.non_finite = true;
            return 0.0;
        }
        v
    }

    #[allow(clippy::too_many_arguments)]
    fn refine(&mut self, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        if self.exhausted {
            return whole;
        }
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = self.eval(lm);
        let frm = self.eval(rm);
        let h = b - a;
        let left = h / 12.0 * (fa + 4.0 * flm + fm);
        let right = h / 12.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if self.evaluations >= MAX_EVALUATIONS {
            self.exhausted = true;
        }
        if depth >= MAX_DEPTH || delta.abs() <= 15.0 * tol || self.non_finite || self.exhausted {
            self.error += delta.abs() / 15.0;
            return left + right + delta / 15.0;
        }
        self.refine(a, m, fa, flm, fm, left, tol / 2.0, depth + 1)
            + self.refine(m, b, fm, frm, fb, right, tol / 2.0, depth + 1)
    }
}

/// Integrates `f` over consecutive panels `[breaks[i], breaks[i+1]]`, each
/// refined adaptively; `tol` is the absolute tolerance for the whole range,
/// shared across panels by width.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, breaks: &[f64], tol: f64) -> Quadrature {
    let mut state = State {
        f,
        evaluations: 0,
        non_finite: false,
        exhausted: false,
        error: 0.0,
    };
    let total = breaks.last().copied().unwrap_or(0.0) - breaks.first().copied().unwrap_or(0.0);
    let mut value = 0.0;
    for pair in breaks.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if !(b > a) {
            continue;
        }
        let fa = state.eval(a);
        let fm = state.eval(0.5 * (a + b));
        let fb = state.eval(b);
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        let panel_tol = tol * (b - a) / total;
        value += state.refine(a, b, fa, fm, fb, whole, panel_tol, 0);
    }
    Quadrature {
        value,
        error_estimate: state.error,
        evaluations: state.evaluations,
        non_finite: state.non_finite,
        exhausted: state.exhausted,
    }
}

/// Evenly spaced panel boundaries no wider than `max_width`.
pub fn uniform_breaks(lo: f64, hi: f64, max_width: f64) -> Vec<f64> {
    let n = (((hi - lo) / max_width).ceil() as usize).max(1);
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}
