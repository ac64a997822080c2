//! Multinomial no-U-turn transitions with a diagonal Euclidean metric.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::LogDensity;
use crate::stats::log_sum_exp;

/// Energy error beyond which a trajectory is declared divergent.
pub const MAX_ENERGY_ERROR: f64 = 1000.0;

#[derive(Debug, Clone)]
pub(crate) struct Point {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
}

impl Point {
    pub fn at<T: LogDensity + ?Sized>(target: &T, q: Vec<f64>) -> Self {
        let mut grad = vec![0.0; q.len()];
        let logp = target.log_density_and_gradient(&q, &mut grad);
        let p = vec![0.0; q.len()];
        Point { q, p, grad, logp }
    }
}

pub(crate) struct Transition {
    pub point: Point,
    pub accept_stat: f64,
    pub n_leapfrog: usize,
    pub divergent: bool,
    pub energy_change: f64,
}

pub(crate) struct Nuts<'a, T: ?Sized> {
    target: &'a T,
    max_depth: usize,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
}

/// Running totals for one trajectory.
struct Walk {
    z: Point,
    h0: f64,
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

impl<'a, T: LogDensity + ?Sized> Nuts<'a, T> {
    pub fn new(target: &'a T, max_depth: usize) -> Self {
        Self {
            target,
            max_depth,
            step_size: 1.0,
            inv_metric: vec![1.0; target.dim()],
        }
    }

    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p
            .iter()
            .zip(&self.inv_metric)
            .map(|(p, m)| p * p * m)
            .sum::<f64>()
    }

    fn hamiltonian(&self, z: &Point) -> f64 {
        let h = -z.logp + self.kinetic(&z.p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(p, m)| p * m).collect()
    }

    fn sample_momentum(&self, z: &mut Point, rng: &mut ChaCha8Rng) {
        for (p, m) in z.p.iter_mut().zip(&self.inv_metric) {
            let u: f64 = rng.sample(StandardNormal);
            *p = u / m.sqrt();
        }
    }

    fn leapfrog(&self, z: &mut Point, eps: f64) {
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(&self.inv_metric) {
            *q += eps * m * p;
        }
        z.logp = self.target.log_density_and_gradient(&z.q, &mut z.grad);
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
    }

    /// Doubles or halves the step size until a single leapfrog step's
    /// acceptance probability crosses 0.8.
    pub fn find_reasonable_step_size(&self, start: &Point, rng: &mut ChaCha8Rng) -> f64 {
        let mut eps = self.step_size;
        let mut z = start.clone();
        self.sample_momentum(&mut z, rng);
        let h0 = self.hamiltonian(&z);
        let mut direction = 0i32;
        for _ in 0..100 {
            let mut trial = z.clone();
            self.leapfrog(&mut trial, eps);
            let delta = h0 - self.hamiltonian(&trial);
            let dir = if delta > 0.8f64.ln() { 1 } else { -1 };
            if direction == 0 {
                direction = dir;
            } else if dir != direction {
                break;
            }
            if direction == 1 {
                eps *= 2.0;
            } else {
                eps *= 0.5;
            }
            if !(1e-12..=1e7).contains(&eps) {
                break;
            }
        }
        eps.clamp(1e-12, 1e7)
    }

    pub fn transition(&self, start: &Point, rng: &mut ChaCha8Rng) -> Transition {
        let mut z = start.clone();
        self.sample_momentum(&mut z, rng);
        let h0 = self.hamiltonian(&z);
        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut z_sample = z.clone();

        let p_sharp0 = self.p_sharp(&z.p);
        let mut p_fwd_fwd = z.p.clone();
        let mut p_sharp_fwd_fwd = p_sharp0.clone();
        let mut p_fwd_bck = z.p.clone();
        let mut p_sharp_fwd_bck = p_sharp0.clone();
        let mut p_bck_fwd = z.p.clone();
        let mut p_sharp_bck_fwd = p_sharp0.clone();
        let mut p_bck_bck = z.p.clone();
        let mut p_sharp_bck_bck = p_sharp0;
        let mut rho = z.p.clone();
        let mut log_sum_weight = 0.0;

        let mut walk = Walk {
            z,
            h0,
            n_leapfrog: 0,
            sum_metro_prob: 0.0,
            divergent: false,
        };
        let dim = rho.len();
        for depth in 0..self.max_depth {
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut lsw_sub = f64::NEG_INFINITY;
            let mut z_propose = walk.z.clone();
            let valid = if rng.random::<f64>() > 0.5 {
                walk.z = z_fwd.clone();
                rho_bck.clone_from(&rho);
                p_bck_fwd.clone_from(&p_fwd_bck);
                p_sharp_bck_fwd.clone_from(&p_sharp_fwd_bck);
                let v = self.build_tree(
                    depth,
                    &mut walk,
                    &mut z_propose,
                    &mut p_sharp_fwd_bck,
                    &mut p_sharp_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    1.0,
                    &mut lsw_sub,
                    rng,
                );
                z_fwd = walk.z.clone();
                v
            } else {
                walk.z = z_bck.clone();
                rho_fwd.clone_from(&rho);
                p_fwd_bck.clone_from(&p_bck_fwd);
                p_sharp_fwd_bck.clone_from(&p_sharp_bck_fwd);
                let v = self.build_tree(
                    depth,
                    &mut walk,
                    &mut z_propose,
                    &mut p_sharp_bck_fwd,
                    &mut p_sharp_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    -1.0,
                    &mut lsw_sub,
                    rng,
                );
                z_bck = walk.z.clone();
                v
            };
            if !valid {
                break;
            }
            if lsw_sub > log_sum_weight {
                z_sample = z_propose;
            } else {
                let accept = (lsw_sub - log_sum_weight).exp();
                if rng.random::<f64>() < accept {
                    z_sample = z_propose;
                }
            }
            log_sum_weight = log_sum_exp(&[log_sum_weight, lsw_sub]);
            rho = add(&rho_bck, &rho_fwd);
            let mut persist = criterion(&p_sharp_bck_bck, &p_sharp_fwd_fwd, &rho);
            let ext = add(&rho_bck, &p_fwd_bck);
            persist &= criterion(&p_sharp_bck_bck, &p_sharp_fwd_bck, &ext);
            let ext = add(&rho_fwd, &p_bck_fwd);
            persist &= criterion(&p_sharp_bck_fwd, &p_sharp_fwd_fwd, &ext);
            if !persist {
                break;
            }
        }
        let n_leapfrog = walk.n_leapfrog.max(1);
        let energy_change = self.hamiltonian(&z_sample) - h0;
        Transition {
            point: z_sample,
            accept_stat: walk.sum_metro_prob / n_leapfrog as f64,
            n_leapfrog: walk.n_leapfrog,
            divergent: walk.divergent,
            energy_change,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &self,
        depth: usize,
        walk: &mut Walk,
        z_propose: &mut Point,
        p_sharp_beg: &mut Vec<f64>,
        p_sharp_end: &mut Vec<f64>,
        rho: &mut [f64],
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        sign: f64,
        log_sum_weight: &mut f64,
        rng: &mut ChaCha8Rng,
    ) -> bool {
        if depth == 0 {
            self.leapfrog(&mut walk.z, sign * self.step_size);
            walk.n_leapfrog += 1;
            let h = self.hamiltonian(&walk.z);
            if h - walk.h0 > MAX_ENERGY_ERROR {
                walk.divergent = true;
            }
            let delta = walk.h0 - h;
            *log_sum_weight = log_sum_exp(&[*log_sum_weight, delta]);
            walk.sum_metro_prob += if delta > 0.0 { 1.0 } else { delta.exp() };
            z_propose.clone_from(&walk.z);
            *p_sharp_beg = self.p_sharp(&walk.z.p);
            p_sharp_end.clone_from(p_sharp_beg);
            for (r, p) in rho.iter_mut().zip(&walk.z.p) {
                *r += p;
            }
            p_beg.clone_from(&walk.z.p);
            p_end.clone_from(p_beg);
            return !walk.divergent;
        }
        let dim = rho.len();
        let mut lsw_init = f64::NEG_INFINITY;
        let mut p_init_end = vec![0.0; dim];
        let mut p_sharp_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        if !self.build_tree(
            depth - 1,
            walk,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            sign,
            &mut lsw_init,
            rng,
        ) {
            return false;
        }
        let mut z_propose_final = walk.z.clone();
        let mut lsw_final = f64::NEG_INFINITY;
        let mut p_final_beg = vec![0.0; dim];
        let mut p_sharp_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
        if !self.build_tree(
            depth - 1,
            walk,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            sign,
            &mut lsw_final,
            rng,
        ) {
            return false;
        }
        let lsw_subtree = log_sum_exp(&[lsw_init, lsw_final]);
        *log_sum_weight = log_sum_exp(&[*log_sum_weight, lsw_subtree]);
        if lsw_final > lsw_subtree {
            *z_propose = z_propose_final;
        } else {
            let accept = (lsw_final - lsw_subtree).exp();
            if rng.random::<f64>() < accept {
                *z_propose = z_propose_final;
            }
        }
        let rho_subtree = add(&rho_init, &rho_final);
        for (r, s) in rho.iter_mut().zip(&rho_subtree) {
            *r += s;
        }
        let mut persist = criterion(p_sharp_beg, p_sharp_end, &rho_subtree);
        let ext = add(&rho_init, &p_final_beg);
        persist &= criterion(p_sharp_beg, &p_sharp_final_beg, &ext);
        let ext = add(&rho_final, &p_init_end);
        persist &= criterion(&p_sharp_init_end, p_sharp_end, &ext);
        persist
    }
}
