//! Warmup adaptation: dual averaging of the step size and a diagonal metric
//! estimated over doubling windows between a fast initial and final buffer.
//!
//! The dual-averaging iterates keep fluctuating, so the averaged step size
//! lands where acceptance is above target. The second half of the final
//! buffer therefore refines the log step size by stochastic approximation
//! with a decaying gain, which settles where the mean acceptance at a fixed
//! step size equals the target.

const INIT_BUFFER: usize = 75;
const TERM_BUFFER: usize = 50;
const BASE_WINDOW: usize = 25;
/// Exponent of the decaying gain in the final refinement.
const POLISH_DECAY: f64 = 0.7;

struct DualAveraging {
    mu: f64,
    target: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(step_size: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * step_size).ln(),
            target,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    fn update(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.clamp(0.0, 1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let x_eta = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Welford running variance.
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn add(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    fn reset(&mut self) {
        self.n = 0;
        self.mean.iter_mut().for_each(|v| *v = 0.0);
        self.m2.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Variance shrunk toward `1e-3` as in common practice for short windows.
    fn regularized_variance(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.m2
            .iter()
            .map(|s| {
                let var = s / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}

pub(crate) struct Adapter {
    dual: DualAveraging,
    target: f64,
    adapt_metric: bool,
    welford: Welford,
    inv_metric: Vec<f64>,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    window_end: usize,
    warmup: usize,
    polish_start: usize,
    polish: Option<(f64, f64)>,
}

impl Adapter {
    pub fn new(warmup: usize, dim: usize, target: f64, adapt_metric: bool) -> Self {
        let (mut init_buffer, mut term_buffer, mut base) =
            (INIT_BUFFER, TERM_BUFFER.max(warmup / 10), BASE_WINDOW);
        let mut adapt_metric = adapt_metric;
        if warmup < 20 {
            adapt_metric = false;
        } else if init_buffer + term_buffer + base > warmup {
            init_buffer = (0.15 * warmup as f64) as usize;
            term_buffer = (0.1 * warmup as f64) as usize;
            base = warmup - init_buffer - term_buffer;
        }
        Self {
            dual: DualAveraging::new(1.0, target),
            target,
            adapt_metric,
            welford: Welford::new(dim),
            inv_metric: vec![1.0; dim],
            init_buffer,
            term_buffer,
            window_size: base,
            window_end: init_buffer + base,
            warmup,
            polish_start: if warmup < 20 { warmup } else { warmup - term_buffer / 2 },
            polish: None,
        }
    }

    pub fn restart(&mut self, step_size: f64) {
        self.dual = DualAveraging::new(step_size, self.target);
    }

    /// Updates the step size after warmup iteration `it`.
    pub fn learn_step_size(&mut self, it: usize, accept_stat: f64) -> f64 {
        if it < self.polish_start {
            return self.dual.update(accept_stat);
        }
        let (x, n) = self
            .polish
            .get_or_insert_with(|| (self.dual.final_step_size().ln(), 0.0));
        *n += 1.0;
        *x += (accept_stat.clamp(0.0, 1.0) - self.target) / n.powf(POLISH_DECAY);
        x.exp()
    }

    pub fn final_step_size(&self) -> f64 {
        match self.polish {
            Some((x, _)) => x.exp(),
            None => self.dual.final_step_size(),
        }
    }

    pub fn inv_metric(&self) -> &[f64] {
        &self.inv_metric
    }

    /// Records warmup iteration `it`; returns true when the metric changed.
    pub fn observe(&mut self, it: usize, q: &[f64]) -> bool {
        if !self.adapt_metric {
            return false;
        }
        let slow_end = self.warmup - self.term_buffer;
        if it < self.init_buffer || it >= slow_end {
            return false;
        }
        self.welford.add(q);
        if it + 1 != self.window_end {
            return false;
        }
        self.inv_metric = self.welford.regularized_variance();
        self.welford.reset();
        self.window_size *= 2;
        let next_end = self.window_end + self.window_size;
        // stretch the last slow window to the start of the final buffer
        self.window_end = if next_end + 2 * self.window_size > slow_end {
            slow_end
        } else {
            next_end
        };
        true
    }
}
