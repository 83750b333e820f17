//! Piecewise 7th-order minimum-snap trajectories.
//!
//! Each segment is fitted in normalized time `s = t / T` and stored with
//! physical-time coefficients. The equality constrained problem is solved over
//! knot derivatives: positions everywhere and rest conditions at both ends are
//! fixed, velocity/acceleration/jerk at interior knots are free.

use nalgebra::{DMatrix, DVector, SMatrix, Vector3};
use thiserror::Error;

use crate::scalar::{lit, Scalar};

/// Number of derivatives pinned at each knot (position through jerk).
const DERIVS: usize = 4;
const COEFFS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TrajectoryError {
    #[error("need at least two waypoints and one duration per segment")]
    DimensionMismatch,
    #[error("segment durations must be positive and finite")]
    SingularSystem,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment<T: Scalar> {
    pub duration: T,
    /// `coeffs[axis][k]` multiplies `t^k`, `t` local to the segment.
    pub coeffs: [[T; COEFFS]; 3],
}

impl<T: Scalar> Segment<T> {
    fn eval(&self, t: T, order: usize) -> Vector3<T> {
        Vector3::from_fn(|axis, _| eval_poly(&self.coeffs[axis], t, order))
    }
}

/// Horner evaluation of the `order`-th derivative.
fn eval_poly<T: Scalar>(c: &[T; COEFFS], t: T, order: usize) -> T {
    let mut acc = T::zero();
    for k in (order..COEFFS).rev() {
        acc = acc * t + c[k] * falling(k, order);
    }
    acc
}

/// k! / (k - r)!
fn falling<T: Scalar>(k: usize, r: usize) -> T {
    let mut f = 1.0;
    for m in 0..r {
        f *= (k - m) as f64;
    }
    lit(f)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample<T: Scalar> {
    pub position: Vector3<T>,
    pub velocity: Vector3<T>,
    pub acceleration: Vector3<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialTrajectory<T: Scalar> {
    segments: Vec<Segment<T>>,
    total_duration: T,
}

impl<T: Scalar> PolynomialTrajectory<T> {
    pub fn from_segments(segments: Vec<Segment<T>>) -> Self {
        let total_duration = segments.iter().fold(T::zero(), |a, s| a + s.duration);
        Self { segments, total_duration }
    }

    pub fn segments(&self) -> &[Segment<T>] {
        &self.segments
    }

    pub fn total_duration(&self) -> T {
        self.total_duration
    }

    /// Start times of every segment plus the final time.
    pub fn knot_times(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.segments.len() + 1);
        let mut t = T::zero();
        out.push(t);
        for s in &self.segments {
            t += s.duration;
            out.push(t);
        }
        out
    }

    fn locate(&self, t: T) -> (usize, T) {
        let t = t.max(T::zero()).min(self.total_duration);
        let mut start = T::zero();
        for (i, s) in self.segments.iter().enumerate() {
            if t < start + s.duration || i + 1 == self.segments.len() {
                return (i, (t - start).max(T::zero()).min(s.duration));
            }
            start += s.duration;
        }
        (0, T::zero())
    }

    /// Derivative of the given order at time `t`, clamped to the trajectory span.
    pub fn derivative(&self, t: T, order: usize) -> Vector3<T> {
        if self.segments.is_empty() {
            return Vector3::zeros();
        }
        let (i, local) = self.locate(t);
        self.segments[i].eval(local, order)
    }

    pub fn sample(&self, t: T) -> TrajectorySample<T> {
        TrajectorySample {
            position: self.derivative(t, 0),
            velocity: self.derivative(t, 1),
            acceleration: self.derivative(t, 2),
        }
    }

    pub fn start(&self) -> Vector3<T> {
        self.derivative(T::zero(), 0)
    }

    pub fn end(&self) -> Vector3<T> {
        self.derivative(self.total_duration, 0)
    }

    /// Integral of the squared snap norm, evaluated in closed form.
    pub fn snap_cost(&self) -> T {
        let mut total = T::zero();
        for s in &self.segments {
            for c in &s.coeffs {
                for k in 4..COEFFS {
                    for l in 4..COEFFS {
                        let p = k + l - 7;
                        let w: T = falling::<T>(k, 4) * falling::<T>(l, 4) / lit(p as f64);
                        total += w * c[k] * c[l] * s.duration.powi(p as i32);
                    }
                }
            }
        }
        total
    }

    /// Same path flown `factor` times slower.
    pub fn time_scaled(&self, factor: T) -> Self {
        let segments = self
            .segments
            .iter()
            .map(|s| {
                let mut coeffs = s.coeffs;
                for c in coeffs.iter_mut() {
                    for (k, v) in c.iter_mut().enumerate() {
                        *v /= factor.powi(k as i32);
                    }
                }
                Segment { duration: s.duration * factor, coeffs }
            })
            .collect();
        Self::from_segments(segments)
    }

    /// Positions every `dt` seconds, always including the final point.
    pub fn to_polyline(&self, dt: T) -> Vec<Vector3<T>> {
        let mut out = Vec::new();
        let mut t = T::zero();
        while t < self.total_duration {
            out.push(self.derivative(t, 0));
            t += dt;
        }
        out.push(self.end());
        out
    }

    /// Largest speed and acceleration norms over a uniform sampling.
    pub fn peak_rates(&self, dt: T) -> (T, T) {
        let mut v = T::zero();
        let mut a = T::zero();
        let mut t = T::zero();
        loop {
            v = v.max(self.derivative(t, 1).norm());
            a = a.max(self.derivative(t, 2).norm());
            if t >= self.total_duration {
                break;
            }
            t = (t + dt).min(self.total_duration);
        }
        (v, a)
    }
}

/// Smallest uniform slow-down factor `k >= 1` such that the time-scaled
/// trajectory satisfies `|v + tau a| <= limit` on a 10 ms sampling.
pub fn feasible_time_scale<T: Scalar>(traj: &PolynomialTrajectory<T>, tau: T, limit: T) -> T {
    let dt: T = lit(0.01);
    let mut samples = Vec::new();
    let mut t = T::zero();
    loop {
        samples.push((traj.derivative(t, 1), traj.derivative(t, 2)));
        if t >= traj.total_duration() {
            break;
        }
        t = (t + dt).min(traj.total_duration());
    }
    let ok = |k: T| samples.iter().all(|(v, a)| (v / k + a * (tau / (k * k))).norm() <= limit);
    if ok(T::one()) {
        return T::one();
    }
    let two: T = lit(2.0);
    let mut hi = two;
    while !ok(hi) {
        hi *= two;
    }
    let mut lo = hi / two;
    for _ in 0..50 {
        let mid = (lo + hi) / two;
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Segment durations from straight-line length at `nominal_speed`, floored at 0.5 s.
pub fn allocate_times<T: Scalar>(waypoints: &[Vector3<T>], nominal_speed: T) -> Vec<T> {
    let t_min: T = lit(0.5);
    waypoints
        .windows(2)
        .map(|w| ((w[1] - w[0]).norm() / nominal_speed).max(t_min))
        .collect()
}

/// Endpoint derivative map in normalized time: rows 0..4 at s = 0, rows 4..8 at s = 1.
fn normalized_boundary_matrix<T: Scalar>() -> SMatrix<T, 8, 8> {
    SMatrix::from_fn(|row, k| {
        let r = row % DERIVS;
        if row < DERIVS {
            if k == r {
                falling(k, r)
            } else {
                T::zero()
            }
        } else if k >= r {
            falling(k, r)
        } else {
            T::zero()
        }
    })
}

/// Snap Gram matrix in normalized time over s in [0, 1].
fn normalized_snap_matrix<T: Scalar>() -> SMatrix<T, 8, 8> {
    SMatrix::from_fn(|k, l| {
        if k < 4 || l < 4 {
            T::zero()
        } else {
            falling::<T>(k, 4) * falling::<T>(l, 4) / lit((k + l - 7) as f64)
        }
    })
}

/// Minimum-snap fit through `waypoints`, at rest at both ends.
pub fn fit_min_snap<T: Scalar>(waypoints: &[Vector3<T>], durations: &[T]) -> Result<PolynomialTrajectory<T>, TrajectoryError> {
    let n = durations.len();
    if waypoints.len() < 2 || waypoints.len() != n + 1 {
        return Err(TrajectoryError::DimensionMismatch);
    }
    if durations.iter().any(|&d| !(d > T::zero()) || !d.is_finite()) {
        return Err(TrajectoryError::SingularSystem);
    }
    let a_inv = normalized_boundary_matrix::<T>()
        .try_inverse()
        .ok_or(TrajectoryError::SingularSystem)?;
    let h = a_inv.transpose() * normalized_snap_matrix::<T>() * a_inv;

    // Knot derivative vector: knot j occupies entries 4j..4j+4.
    let dim = DERIVS * (n + 1);
    let mut r = DMatrix::<T>::zeros(dim, dim);
    for (i, &dur) in durations.iter().enumerate() {
        let scale: Vec<T> = (0..8).map(|row| dur.powi((row % DERIVS) as i32)).collect();
        let w = T::one() / dur.powi(7);
        for a in 0..8 {
            for b in 0..8 {
                let v = h[(a, b)] * scale[a] * scale[b] * w;
                r[(DERIVS * i + a, DERIVS * i + b)] += v;
            }
        }
    }
    let is_free = |idx: usize| {
        let knot = idx / DERIVS;
        idx % DERIVS != 0 && knot != 0 && knot != n
    };
    let free: Vec<usize> = (0..dim).filter(|&i| is_free(i)).collect();
    let fixed: Vec<usize> = (0..dim).filter(|&i| !is_free(i)).collect();
    let r_pp = DMatrix::from_fn(free.len(), free.len(), |a, b| r[(free[a], free[b])]);
    let r_pf = DMatrix::from_fn(free.len(), fixed.len(), |a, b| r[(free[a], fixed[b])]);
    let solver = if free.is_empty() { None } else { Some(r_pp.clone().cholesky().ok_or(TrajectoryError::SingularSystem)?) };

    let mut knots = [DVector::<T>::zeros(dim), DVector::<T>::zeros(dim), DVector::<T>::zeros(dim)];
    for (axis, d) in knots.iter_mut().enumerate() {
        for j in 0..=n {
            d[DERIVS * j] = waypoints[j][axis];
        }
        if let Some(chol) = &solver {
            let d_f = DVector::from_fn(fixed.len(), |a, _| d[fixed[a]]);
            let d_p = chol.solve(&(-(&r_pf * d_f)));
            if d_p.iter().any(|v| !v.is_finite()) {
                return Err(TrajectoryError::SingularSystem);
            }
            for (a, &idx) in free.iter().enumerate() {
                d[idx] = d_p[a];
            }
        }
    }

    let segments = durations
        .iter()
        .enumerate()
        .map(|(i, &dur)| {
            let mut coeffs = [[T::zero(); COEFFS]; 3];
            for (axis, d) in knots.iter().enumerate() {
                let local = nalgebra::SVector::<T, 8>::from_fn(|row, _| {
                    d[DERIVS * i + row] * dur.powi((row % DERIVS) as i32)
                });
                let a = a_inv * local;
                for k in 0..COEFFS {
                    coeffs[axis][k] = a[k] / dur.powi(k as i32);
                }
            }
            Segment { duration: dur, coeffs }
        })
        .collect();
    Ok(PolynomialTrajectory::from_segments(segments))
}

/// Rest-to-rest fit of every segment on its own: the path stays on the straight
/// polyline and stops at each waypoint.
pub fn fit_stop_and_go<T: Scalar>(waypoints: &[Vector3<T>], durations: &[T]) -> Result<PolynomialTrajectory<T>, TrajectoryError> {
    if waypoints.len() < 2 || waypoints.len() != durations.len() + 1 {
        return Err(TrajectoryError::DimensionMismatch);
    }
    let mut segments = Vec::with_capacity(durations.len());
    for (w, &d) in waypoints.windows(2).zip(durations) {
        let one = fit_min_snap(w, &[d])?;
        segments.extend(one.segments);
    }
    Ok(PolynomialTrajectory::from_segments(segments))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type V = Vector3<f64>;

    #[test]
    fn allocate_times_examples() {
        let w = [V::zeros(), V::new(1.0, 0.0, 0.0)];
        assert_eq!(allocate_times(&w, 1.0), vec![1.0]);
        assert_eq!(allocate_times(&[V::zeros(), V::zeros()], 1.0), vec![0.5]);
        let w = [V::zeros(), V::new(1.0, 0.0, 0.0), V::new(1.0, 2.0, 0.0)];
        assert_eq!(allocate_times(&w, 1.0), vec![1.0, 2.0]);
    }

    #[test]
    fn single_segment_boundaries() {
        let a = V::new(0.5, -1.0, 2.0);
        let b = V::new(3.0, 1.0, 1.0);
        let t = fit_min_snap(&[a, b], &[2.0]).unwrap();
        assert!((t.sample(0.0).position - a).norm() < 1e-9);
        assert!((t.sample(2.0).position - b).norm() < 1e-9);
        for order in 1..4 {
            assert!(t.derivative(0.0, order).norm() < 1e-9);
            assert!(t.derivative(2.0, order).norm() < 1e-9);
        }
    }

    #[test]
    fn coincident_points_hover() {
        let p = V::new(1.0, 2.0, 1.0);
        let t = fit_min_snap(&[p, p], &[0.5]).unwrap();
        for s in [0.0, 0.1, 0.25, 0.5] {
            assert!((t.sample(s).position - p).norm() < 1e-12);
            for order in 1..=4 {
                assert!(t.derivative(s, order).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let p = V::zeros();
        assert_eq!(fit_min_snap(&[p], &[]), Err(TrajectoryError::DimensionMismatch));
        assert_eq!(fit_min_snap(&[p, p], &[1.0, 1.0]), Err(TrajectoryError::DimensionMismatch));
        assert_eq!(fit_min_snap(&[p, p], &[0.0]), Err(TrajectoryError::SingularSystem));
        assert_eq!(fit_min_snap(&[p, p], &[f64::NAN]), Err(TrajectoryError::SingularSystem));
    }

    #[test]
    fn sample_clamps_time() {
        let a = V::zeros();
        let b = V::new(1.0, 0.0, 0.0);
        let t = fit_min_snap(&[a, b], &[1.0]).unwrap();
        assert_eq!(t.sample(-3.0).position, t.sample(0.0).position);
        assert_eq!(t.sample(9.0).position, t.sample(1.0).position);
        assert!(t.sample(9.0).velocity.norm() < 1e-9);
    }

    #[test]
    fn straight_segment_midpoint_speed() {
        // Closed form for a rest-to-rest 7th order segment: p(s) = 35s^4 - 84s^5 + 70s^6 - 20s^7,
        // whose peak slope at s = 1/2 is 35/16.
        let t_total = 2.0;
        let t = fit_min_snap(&[V::zeros(), V::new(1.0, 0.0, 0.0)], &[t_total]).unwrap();
        let v = t.sample(1.0).velocity.x;
        assert_relative_eq!(v, 35.0 / 16.0 / t_total, epsilon = 1e-9);
        assert!(v >= 1.0 / t_total);
        for s in [0.1f64, 0.3, 0.77] {
            let x = s;
            let expect = 35.0 * x.powi(4) - 84.0 * x.powi(5) + 70.0 * x.powi(6) - 20.0 * x.powi(7);
            assert_relative_eq!(t.sample(s * t_total).position.x, expect, epsilon = 1e-9);
        }
    }

    fn random_waypoints(rng: &mut ChaCha8Rng, n: usize) -> Vec<V> {
        (0..n)
            .map(|_| V::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.5..2.5)))
            .collect()
    }

    /// Minimum-norm piecewise-constant snap that steers a quadruple integrator
    /// from rest through the knot positions and back to rest; returns its cost.
    fn discretized_snap_oracle(waypoints: &[V], durations_ms: &[usize]) -> f64 {
        let h = 1e-3;
        let steps: usize = durations_ms.iter().sum();
        let mut knot_steps = vec![0usize];
        for d in durations_ms {
            knot_steps.push(knot_steps.last().unwrap() + d);
        }
        let mut cost = 0.0;
        for axis in 0..3 {
            // Constraint rows: interior positions, then final position/velocity/acceleration/jerk.
            let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
            let p0 = waypoints[0][axis];
            let contrib = |t_end: f64, order: usize| -> Vec<f64> {
                (0..steps)
                    .map(|j| {
                        let a = j as f64 * h;
                        if a >= t_end - 1e-12 {
                            return 0.0;
                        }
                        let hi = t_end - a;
                        let lo = (t_end - a - h).max(0.0);
                        let pw = 4 - order;
                        let fact = [1.0, 1.0, 2.0, 6.0, 24.0][pw];
                        (hi.powi(pw as i32) - lo.powi(pw as i32)) / fact
                    })
                    .collect()
            };
            for (m, &ks) in knot_steps.iter().enumerate().skip(1) {
                let t = ks as f64 * h;
                rows.push((contrib(t, 0), waypoints[m][axis] - p0));
                if m == knot_steps.len() - 1 {
                    for order in 1..4 {
                        rows.push((contrib(t, order), 0.0));
                    }
                }
            }
            let c = DMatrix::from_fn(rows.len(), steps, |r, j| rows[r].0[j]);
            let b = DVector::from_fn(rows.len(), |r, _| rows[r].1);
            let cct = &c * c.transpose();
            let y = cct.lu().solve(&b).unwrap();
            let u = c.transpose() * y;
            cost += u.norm_squared() * h;
        }
        cost
    }

    #[test]
    fn snap_cost_matches_discretized_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..3 {
            let w = random_waypoints(&mut rng, 4);
            let durs_ms: Vec<usize> = allocate_times(&w, 1.0).iter().map(|d| (d * 1000.0).round() as usize).collect();
            let durs: Vec<f64> = durs_ms.iter().map(|&d| d as f64 / 1000.0).collect();
            let traj = fit_min_snap(&w, &durs).unwrap();
            let oracle = discretized_snap_oracle(&w, &durs_ms);
            let analytic = traj.snap_cost();
            assert!((analytic - oracle).abs() <= 0.05 * oracle, "{analytic} vs {oracle}");
        }
    }

    #[test]
    fn snap_cost_is_optimal_against_perturbations() {
        // Stop-and-go meets the same constraints plus extra ones.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_waypoints(&mut rng, 5);
        let d = allocate_times(&w, 1.0);
        let free = fit_min_snap(&w, &d).unwrap().snap_cost();
        let stopped = fit_stop_and_go(&w, &d).unwrap().snap_cost();
        assert!(free <= stopped + 1e-9);
    }

    fn check_invariants(w: &[V], d: &[f64]) {
        let traj = fit_min_snap(w, d).unwrap();
        let knots = traj.knot_times();
        for (k, p) in knots.iter().zip(w) {
            assert!((traj.sample(*k).position - p).norm() < 1e-6);
        }
        for &t in [0.0, traj.total_duration()].iter() {
            for order in 1..4 {
                assert!(traj.derivative(t, order).norm() < 1e-6);
            }
        }
        // Central differences straddling each interior knot against analytic derivatives.
        let e = 1e-4;
        for &k in &knots[1..knots.len() - 1] {
            for order in 1..=3 {
                let fd = (traj.derivative(k + e, order - 1) - traj.derivative(k - e, order - 1)) / (2.0 * e);
                let analytic = traj.derivative(k, order);
                assert!((fd - analytic).norm() < 1e-4 * (1.0 + analytic.norm()), "order {order} at {k}");
            }
        }
        // Velocity against central differences of position on a 1 ms grid.
        let h = 1e-5;
        let mut t = h;
        while t < traj.total_duration() - h {
            let fd = (traj.sample(t + h).position - traj.sample(t - h).position) / (2.0 * h);
            assert!((fd - traj.sample(t).velocity).norm() < 1e-5);
            t += 1e-3;
        }
    }

    #[test]
    fn random_sets_satisfy_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 2..8 {
            let w = random_waypoints(&mut rng, n);
            let d = allocate_times(&w, 1.0);
            check_invariants(&w, &d);
        }
    }

    #[test]
    fn stop_and_go_stays_on_polyline() {
        let w = vec![V::zeros(), V::new(2.0, 0.0, 0.0), V::new(2.0, 1.5, 1.0)];
        let d = allocate_times(&w, 1.0);
        let t = fit_stop_and_go(&w, &d).unwrap();
        for p in t.to_polyline(0.01) {
            let on_first = p.y.abs() < 1e-9 && p.z.abs() < 1e-9 && p.x > -1e-9 && p.x < 2.0 + 1e-9;
            let u = p - w[1];
            let dir = (w[2] - w[1]).normalize();
            let on_second = (u - dir * u.dot(&dir)).norm() < 1e-9;
            assert!(on_first || on_second, "{p:?}");
        }
    }

    #[test]
    fn time_scaling_preserves_path() {
        let w = vec![V::zeros(), V::new(1.0, 1.0, 0.0), V::new(2.0, 0.0, 1.0)];
        let d = allocate_times(&w, 1.0);
        let t = fit_min_snap(&w, &d).unwrap();
        let slow = t.time_scaled(2.0);
        assert_relative_eq!(slow.total_duration(), 2.0 * t.total_duration(), epsilon = 1e-12);
        for s in [0.0, 0.3, 1.1, 2.0] {
            assert!((slow.sample(2.0 * s).position - t.sample(s).position).norm() < 1e-9);
            assert!((slow.sample(2.0 * s).velocity * 2.0 - t.sample(s).velocity).norm() < 1e-9);
        }
        let refit = fit_min_snap(&w, &d.iter().map(|x| 2.0 * x).collect::<Vec<_>>()).unwrap();
        for s in [0.5, 1.7, 3.2] {
            assert!((refit.sample(s).position - slow.sample(s).position).norm() < 1e-9);
        }
    }

    #[test]
    fn feasible_scale_meets_limit() {
        let w = [V::zeros(), V::new(2.0, 0.0, 0.0), V::new(2.0, 3.0, 0.0)];
        let t = fit_min_snap(&w, &allocate_times(&w, 1.0)).unwrap();
        let k = feasible_time_scale(&t, 0.3, 1.425);
        assert!(k > 1.0);
        let slow = t.time_scaled(k);
        let mut s = 0.0;
        let mut worst: f64 = 0.0;
        while s <= slow.total_duration() {
            worst = worst.max((slow.derivative(s, 1) + slow.derivative(s, 2) * 0.3).norm());
            s += 0.001;
        }
        assert!(worst <= 1.425 * 1.001, "{worst}");
        assert!(worst >= 1.425 * 0.99);
        assert_eq!(feasible_time_scale(&t, 0.3, 100.0), 1.0);
    }

    #[test]
    fn f32_fit_interpolates() {
        let w = [Vector3::<f32>::zeros(), Vector3::new(1.0, 2.0, 0.5), Vector3::new(2.0, 2.0, 1.0)];
        let d = allocate_times(&w, 1.0f32);
        let t = fit_min_snap(&w, &d).unwrap();
        for (k, p) in t.knot_times().iter().zip(&w) {
            assert!((t.sample(*k).position - p).norm() < 1e-4);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn translation_equivariance(
            pts in proptest::collection::vec((-4.0..4.0f64, -4.0..4.0f64, 0.0..3.0f64), 2..6),
            shift in (-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64),
        ) {
            let w: Vec<V> = pts.iter().map(|&(x, y, z)| V::new(x, y, z)).collect();
            let s = V::new(shift.0, shift.1, shift.2);
            let moved: Vec<V> = w.iter().map(|p| p + s).collect();
            let d = allocate_times(&w, 1.0);
            let a = fit_min_snap(&w, &d).unwrap();
            let b = fit_min_snap(&moved, &d).unwrap();
            let mut t = 0.0;
            while t <= a.total_duration() {
                prop_assert!((b.sample(t).position - a.sample(t).position - s).norm() < 1e-9);
                t += 0.05;
            }
        }

        #[test]
        fn knots_interpolated(pts in proptest::collection::vec((-4.0..4.0f64, -4.0..4.0f64, 0.0..3.0f64), 2..7)) {
            let w: Vec<V> = pts.iter().map(|&(x, y, z)| V::new(x, y, z)).collect();
            let d = allocate_times(&w, 1.0);
            let t = fit_min_snap(&w, &d).unwrap();
            for (k, p) in t.knot_times().iter().zip(&w) {
                prop_assert!((t.sample(*k).position - p).norm() < 1e-6);
            }
            prop_assert!(t.sample(0.0).velocity.norm() < 1e-6);
            prop_assert!(t.sample(t.total_duration()).velocity.norm() < 1e-6);
        }
    }
}
