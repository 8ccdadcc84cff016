/// Right-continuous step function starting at 0, e.g. a cumulative hazard.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepFunction {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl StepFunction {
    /// Jump times must be strictly ascending and values nondecreasing and
    /// nonnegative.
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Self {
        assert_eq!(times.len(), values.len());
        debug_assert!(times.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(values.windows(2).all(|w| w[0] <= w[1]));
        debug_assert!(values.first().is_none_or(|&v| v >= 0.0));
        StepFunction { times, values }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value at `t`: the last jump at or before `t`, 0 before the first jump.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.times.partition_point(|&x| x <= t);
        if n == 0 {
            0.0
        } else {
            self.values[n - 1]
        }
    }

    /// `exp(-H(t))` for a cumulative hazard.
    pub fn survival(&self, t: f64) -> f64 {
        (-self.eval(t)).exp()
    }
}
