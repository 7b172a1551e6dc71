//! Latent dynamics identification: polynomial feature libraries, compactly
//! supported test functions, trapezoidal weak integrals, and the strong- and
//! weak-form residuals that tie an autoencoder to `dz/dt = Theta(z) Xi`.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::fom::TimeGrid;
use crate::net::Mlp;
use crate::{Error, Result};

/// Polynomial library of total degree `degree` (1 or 2).
///
/// Terms are ordered: constant (optional), linear terms `z_0..z_{n-1}`, then
/// for degree 2 the products `z_a z_b` with `a <= b` in lexicographic order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LibrarySpec {
    pub degree: usize,
    #[serde(default = "yes")]
    pub include_constant: bool,
}

fn yes() -> bool {
    true
}

impl LibrarySpec {
    pub fn new(degree: usize) -> Result<Self> {
        let spec = Self {
            degree,
            include_constant: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.degree) {
            return Err(Error::Config(format!(
                "library degree must be 1 or 2, got {}",
                self.degree
            )));
        }
        Ok(())
    }

    pub fn n_terms(&self, nz: usize) -> usize {
        let mut n = usize::from(self.include_constant) + nz;
        if self.degree >= 2 {
            n += nz * (nz + 1) / 2;
        }
        n
    }

    pub fn eval(&self, z: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_terms(z.len()));
        self.eval_into(z, &mut out);
        out
    }

    /// Like [`eval`](Self::eval), reusing `out`.
    pub fn eval_into(&self, z: &[f64], out: &mut Vec<f64>) {
        out.clear();
        if self.include_constant {
            out.push(1.0);
        }
        out.extend_from_slice(z);
        if self.degree >= 2 {
            for a in 0..z.len() {
                for b in a..z.len() {
                    out.push(z[a] * z[b]);
                }
            }
        }
    }

    /// Row-wise library evaluation, `B x N_z -> B x N_l`.
    pub fn eval_batch(&self, z: ArrayView2<'_, f64>) -> Array2<f64> {
        let nz = z.ncols();
        let mut out = Array2::zeros((z.nrows(), self.n_terms(nz)));
        for (zr, mut or) in z.rows().into_iter().zip(out.rows_mut()) {
            let zr = zr
                .as_slice()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| zr.to_vec());
            for (o, v) in or.iter_mut().zip(self.eval(&zr)) {
                *o = v;
            }
        }
        out
    }

    /// Pulls a gradient with respect to the features back to the latent
    /// inputs.
    pub fn backprop(&self, z: ArrayView2<'_, f64>, grad_theta: ArrayView2<'_, f64>) -> Array2<f64> {
        let nz = z.ncols();
        let off = usize::from(self.include_constant);
        let mut gz = grad_theta.slice(s![.., off..off + nz]).to_owned();
        if self.degree >= 2 {
            for r in 0..z.nrows() {
                let mut k = off + nz;
                for a in 0..nz {
                    for b in a..nz {
                        let g = grad_theta[(r, k)];
                        gz[(r, a)] += g * z[(r, b)];
                        gz[(r, b)] += g * z[(r, a)];
                        k += 1;
                    }
                }
            }
        }
        gz
    }
}

/// Coefficients `Xi` (`N_l x N_z`) checked against a library.
pub fn check_coeffs(lib: &LibrarySpec, xi: ArrayView2<'_, f64>, nz: usize) -> Result<()> {
    if xi.ncols() != nz {
        return Err(Error::shape("coefficient columns", nz, xi.ncols()));
    }
    let nl = lib.n_terms(nz);
    if xi.nrows() != nl {
        return Err(Error::shape("coefficient rows", nl, xi.nrows()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn center(&self) -> usize {
        (self.start + self.end) / 2
    }
}

/// Settings for [`TestFunctionSet::build`]; unset sizes fall back to
/// `support = max(8, N_t / 10)` and `stride = support / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFunctionConfig {
    #[serde(default)]
    pub support_steps: Option<usize>,
    #[serde(default)]
    pub stride: Option<usize>,
    #[serde(default = "four")]
    pub p: u32,
    #[serde(default = "four")]
    pub q: u32,
}

fn four() -> u32 {
    4
}

impl Default for TestFunctionConfig {
    fn default() -> Self {
        Self {
            support_steps: None,
            stride: None,
            p: 4,
            q: 4,
        }
    }
}

impl TestFunctionConfig {
    pub fn resolve(&self, time: &TimeGrid) -> (usize, usize) {
        let support = self
            .support_steps
            .unwrap_or_else(|| (time.steps / 10).max(8).min(time.steps));
        let stride = self.stride.unwrap_or((support / 2).max(1));
        (support, stride)
    }

    pub fn build(&self, time: &TimeGrid) -> Result<TestFunctionSet> {
        let (support, stride) = self.resolve(time);
        TestFunctionSet::build(time, support, stride, self.p, self.q)
    }
}

/// Piecewise-polynomial test functions
/// `phi_k(t) = C_k (t - t_a)^p (t_b - t)^q` on sliding windows, normalised to
/// unit trapezoidal L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunctionSet {
    pub windows: Vec<Window>,
    pub p: u32,
    pub q: u32,
    pub dt: f64,
    /// `phi_k(t_n)` on the full grid, `K x (N_t + 1)`.
    pub values: Array2<f64>,
    /// `phi_k'(t_n)`, same layout.
    pub derivs: Array2<f64>,
    pub norms: Vec<f64>,
    quad_values: Array2<f64>,
    quad_derivs: Array2<f64>,
}

impl TestFunctionSet {
    pub fn build(
        time: &TimeGrid,
        support_steps: usize,
        stride: usize,
        p: u32,
        q: u32,
    ) -> Result<Self> {
        if support_steps < 4 {
            return Err(Error::Config(format!(
                "test-function support of {support_steps} steps (need >= 4)"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("test-function stride must be >= 1".into()));
        }
        if p < 2 || q < 2 {
            return Err(Error::Config(format!(
                "test-function degrees p={p}, q={q} (need >= 2)"
            )));
        }
        if support_steps > time.steps {
            return Err(Error::Config(format!(
                "test-function support of {support_steps} steps exceeds trajectory of {} steps",
                time.steps
            )));
        }
        let dt = time.dt;
        let n_snap = time.n_snapshots();
        let windows: Vec<Window> = (0..)
            .map(|k| k * stride)
            .take_while(|&a| a + support_steps <= time.steps)
            .map(|a| Window {
                start: a,
                end: a + support_steps,
            })
            .collect();
        let k = windows.len();
        let mut values = Array2::zeros((k, n_snap));
        let mut derivs = Array2::zeros((k, n_snap));
        let mut quad_values = Array2::zeros((k, n_snap));
        let mut quad_derivs = Array2::zeros((k, n_snap));
        let mut norms = Vec::with_capacity(k);
        let (pf, qf) = (p as f64, q as f64);
        let (pi, qi) = (p as i32, q as i32);
        for (w, win) in windows.iter().enumerate() {
            let ta = time.t(win.start);
            let tb = time.t(win.end);
            for n in win.start..=win.end {
                let t = time.t(n);
                let (l, r) = (t - ta, tb - t);
                values[(w, n)] = l.powi(pi) * r.powi(qi);
                derivs[(w, n)] =
                    pf * l.powi(pi - 1) * r.powi(qi) - qf * l.powi(pi) * r.powi(qi - 1);
            }
            let mut row = values.row_mut(w);
            // endpoints are exactly zero for p, q >= 1
            row[win.start] = 0.0;
            row[win.end] = 0.0;
            let norm2: f64 = trapezoid_weights(win, dt)
                .map(|(n, wt)| wt * values[(w, n)] * values[(w, n)])
                .sum();
            let c = 1.0 / norm2.sqrt();
            norms.push(c);
            values.row_mut(w).mapv_inplace(|v| v * c);
            derivs.row_mut(w).mapv_inplace(|v| v * c);
            for (n, wt) in trapezoid_weights(win, dt) {
                quad_values[(w, n)] = wt * values[(w, n)];
                quad_derivs[(w, n)] = wt * derivs[(w, n)];
            }
        }
        Ok(Self {
            windows,
            p,
            q,
            dt,
            values,
            derivs,
            norms,
            quad_values,
            quad_derivs,
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn n_snapshots(&self) -> usize {
        self.values.ncols()
    }

    pub fn centers(&self) -> Vec<usize> {
        self.windows.iter().map(Window::center).collect()
    }

    /// Trapezoid-weighted samples, `K x (N_t + 1)`: row `k` dotted with a
    /// signal gives `int s phi_k dt` (or `int s phi_k' dt`).
    pub fn quadrature(&self, use_derivative: bool) -> ArrayView2<'_, f64> {
        if use_derivative {
            self.quad_derivs.view()
        } else {
            self.quad_values.view()
        }
    }
}

fn trapezoid_weights(win: &Window, dt: f64) -> impl Iterator<Item = (usize, f64)> + '_ {
    (win.start..=win.end).map(move |n| {
        let w = if n == win.start || n == win.end {
            0.5 * dt
        } else {
            dt
        };
        (n, w)
    })
}

/// Trapezoid-rule integrals of a sampled signal against every test function
/// (or its derivative). `values` is `(N_t + 1) x d`; the result is `K x d`.
pub fn weak_integral(
    values: ArrayView2<'_, f64>,
    tests: &TestFunctionSet,
    use_derivative: bool,
) -> Result<Array2<f64>> {
    if values.nrows() != tests.n_snapshots() {
        return Err(Error::shape(
            "weak integral rows",
            tests.n_snapshots(),
            values.nrows(),
        ));
    }
    Ok(tests.quadrature(use_derivative).dot(&values))
}

/// How the weak left-hand sides are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeakVariant {
    /// Network Jacobians evaluated at each window's centre snapshot and pulled
    /// out of the time integral.
    TypeI,
    /// Integration by parts applied directly to the encoded / decoded signals.
    TypeII,
}

/// Both sides of the weak latent and physical residuals, one row per test
/// function.
#[derive(Debug, Clone)]
pub struct WeakTerms {
    /// `int z' phi dt` from the encoder.
    pub z_lhs: Array2<f64>,
    /// `int Theta(z) Xi phi dt`.
    pub z_rhs: Array2<f64>,
    /// `-int u phi' dt` from the data.
    pub u_data: Array2<f64>,
    /// `int u_hat' phi dt` from the decoder.
    pub u_model: Array2<f64>,
}

impl WeakTerms {
    pub fn z_residual(&self) -> Array2<f64> {
        &self.z_lhs - &self.z_rhs
    }

    pub fn u_residual(&self) -> Array2<f64> {
        &self.u_data - &self.u_model
    }
}

/// Evaluates the weak residual terms of one trajectory `u` (`(N_t+1) x N_u`).
pub fn weak_residual_terms(
    encoder: &Mlp,
    decoder: &Mlp,
    library: &LibrarySpec,
    xi: ArrayView2<'_, f64>,
    tests: &TestFunctionSet,
    u: ArrayView2<'_, f64>,
    variant: WeakVariant,
) -> Result<WeakTerms> {
    let nz = encoder.output_width();
    if decoder.input_width() != nz {
        return Err(Error::shape("decoder input", nz, decoder.input_width()));
    }
    check_coeffs(library, xi, nz)?;
    let z = encoder.eval(u)?;
    let f = library.eval_batch(z.view()).dot(&xi);
    let z_rhs = weak_integral(f.view(), tests, false)?;
    let u_data = -weak_integral(u, tests, true)?;
    let (z_lhs, u_model) = match variant {
        WeakVariant::TypeI => {
            let centers = tests.centers();
            let enc_trace = encoder.forward(u.select(Axis(0), &centers).view())?;
            let z_lhs = encoder.jvp(&enc_trace, u_data.view())?.output;
            let dec_trace = decoder.forward(z.select(Axis(0), &centers).view())?;
            let u_model = decoder.jvp(&dec_trace, z_rhs.view())?.output;
            (z_lhs, u_model)
        }
        WeakVariant::TypeII => {
            let u_hat = decoder.eval(z.view())?;
            (
                -weak_integral(z.view(), tests, true)?,
                -weak_integral(u_hat.view(), tests, true)?,
            )
        }
    };
    Ok(WeakTerms {
        z_lhs,
        z_rhs,
        u_data,
        u_model,
    })
}

/// Both sides of the pointwise (strong-form) residuals, one row per snapshot.
#[derive(Debug, Clone)]
pub struct StrongTerms {
    /// `J_e(u_n) u'_n`
    pub z_data: Array2<f64>,
    /// `Theta(z_n) Xi`
    pub z_model: Array2<f64>,
    /// `u'_n`
    pub u_data: Array2<f64>,
    /// `J_d(z_n) Theta(z_n) Xi`
    pub u_model: Array2<f64>,
}

impl StrongTerms {
    pub fn z_residual(&self) -> Array2<f64> {
        &self.z_data - &self.z_model
    }

    pub fn u_residual(&self) -> Array2<f64> {
        &self.u_data - &self.u_model
    }
}

pub fn strong_residual_terms(
    encoder: &Mlp,
    decoder: &Mlp,
    library: &LibrarySpec,
    xi: ArrayView2<'_, f64>,
    u: ArrayView2<'_, f64>,
    udot: ArrayView2<'_, f64>,
) -> Result<StrongTerms> {
    let nz = encoder.output_width();
    check_coeffs(library, xi, nz)?;
    if udot.dim() != u.dim() {
        return Err(Error::shape("derivative rows", u.nrows(), udot.nrows()));
    }
    let enc_trace = encoder.forward(u)?;
    let z_data = encoder.jvp(&enc_trace, udot)?.output;
    let z = &enc_trace.output;
    let z_model = library.eval_batch(z.view()).dot(&xi);
    let dec_trace = decoder.forward(z.view())?;
    let u_model = decoder.jvp(&dec_trace, z_model.view())?.output;
    Ok(StrongTerms {
        z_data,
        z_model,
        u_data: udot.to_owned(),
        u_model,
    })
}

/// Second-order finite differences in time: central in the interior,
/// one-sided three-point at the ends.
pub fn central_difference(u: ArrayView2<'_, f64>, dt: f64) -> Result<Array2<f64>> {
    let n = u.nrows();
    if n < 3 {
        return Err(Error::shape("finite-difference snapshots (min)", 3, n));
    }
    let mut d = Array2::zeros(u.raw_dim());
    for i in 1..n - 1 {
        let row = (&u.row(i + 1) - &u.row(i - 1)) / (2.0 * dt);
        d.row_mut(i).assign(&row);
    }
    let first = (&u.row(1) * 4.0 - &u.row(0) * 3.0 - u.row(2)) / (2.0 * dt);
    d.row_mut(0).assign(&first);
    let last = (&u.row(n - 2) * -4.0 + &u.row(n - 1) * 3.0 + u.row(n - 3)) / (2.0 * dt);
    d.row_mut(n - 1).assign(&last);
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Dense, NetSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn identity_net(n: usize) -> Mlp {
        Mlp::from_layers(vec![Dense {
            weight: Array2::eye(n),
            bias: Array1::zeros(n),
        }])
        .unwrap()
    }

    #[test]
    fn library_values_and_sizes() {
        let l1 = LibrarySpec::new(1).unwrap();
        assert_eq!(l1.eval(&[2.0, 3.0]), vec![1.0, 2.0, 3.0]);
        let l2 = LibrarySpec::new(2).unwrap();
        assert_eq!(l2.eval(&[2.0, 3.0]), vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
        assert_eq!(l2.n_terms(5), 21);
        assert!(LibrarySpec::new(3).is_err());
    }

    #[test]
    fn library_backprop_matches_finite_differences() {
        let lib = LibrarySpec::new(2).unwrap();
        let z = array![[0.3, -1.2, 0.7]];
        let g = array![[0.5, 1.0, -2.0, 0.25, 0.1, -0.3, 0.7, 1.1, -0.4, 0.9]];
        let gz = lib.backprop(z.view(), g.view());
        let h = 1e-6;
        for c in 0..3 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[(0, c)] += h;
            zm[(0, c)] -= h;
            let fp = (&lib.eval_batch(zp.view()) * &g).sum();
            let fm = (&lib.eval_batch(zm.view()) * &g).sum();
            assert_abs_diff_eq!(gz[(0, c)], (fp - fm) / (2.0 * h), epsilon = 1e-8);
        }
    }

    #[test]
    fn window_counts() {
        let time = TimeGrid::new(1.0, 100).unwrap();
        assert_eq!(
            TestFunctionSet::build(&time, 20, 10, 4, 4).unwrap().len(),
            9
        );
        assert_eq!(
            TestFunctionSet::build(&time, 100, 7, 4, 4).unwrap().len(),
            1
        );
        assert!(TestFunctionSet::build(&time, 101, 1, 4, 4).is_err());
        assert!(TestFunctionSet::build(&time, 3, 1, 4, 4).is_err());
        assert!(TestFunctionSet::build(&time, 10, 1, 1, 4).is_err());
    }

    #[test]
    fn symmetric_test_functions_are_symmetric() {
        let time = TimeGrid::new(2.0, 80).unwrap();
        let tf = TestFunctionSet::build(&time, 16, 8, 3, 3).unwrap();
        for (k, w) in tf.windows.iter().enumerate() {
            for s in 0..=16 {
                assert_abs_diff_eq!(
                    tf.values[(k, w.start + s)],
                    tf.values[(k, w.end - s)],
                    epsilon = 1e-14
                );
            }
        }
    }

    #[test]
    fn normalisation_and_zero_mean_derivative() {
        let time = TimeGrid::new(1.0, 100).unwrap();
        let tf = TestFunctionSet::build(&time, 20, 5, 4, 4).unwrap();
        let ones = Array2::ones((101, 1));
        let int_phi = weak_integral(ones.view(), &tf, false).unwrap();
        let int_dphi = weak_integral(ones.view(), &tf, true).unwrap();
        for k in 0..tf.len() {
            let sq: f64 = tf
                .values
                .row(k)
                .iter()
                .zip(tf.quadrature(false).row(k))
                .map(|(a, b)| a * b)
                .sum();
            assert_abs_diff_eq!(sq, 1.0, epsilon = 1e-10);
            assert!(int_phi[(k, 0)] > 0.0);
            assert!(int_dphi[(k, 0)].abs() < 1e-12);
            assert_eq!(tf.values[(k, tf.windows[k].start)], 0.0);
            assert_eq!(tf.values[(k, tf.windows[k].end)], 0.0);
        }
    }

    #[test]
    fn linear_signal_against_derivative_is_minus_integral() {
        let time = TimeGrid::new(1.0, 200).unwrap();
        let tf = TestFunctionSet::build(&time, 40, 20, 4, 4).unwrap();
        let t = Array2::from_shape_fn((201, 1), |(n, _)| time.t(n));
        let lhs = weak_integral(t.view(), &tf, true).unwrap();
        let rhs = weak_integral(Array2::ones((201, 1)).view(), &tf, false).unwrap();
        for k in 0..tf.len() {
            assert!((lhs[(k, 0)] + rhs[(k, 0)]).abs() < 1e-4 * rhs[(k, 0)]);
        }
    }

    #[test]
    fn white_noise_is_attenuated_by_sqrt_dt() {
        let time = TimeGrid::new(1.0, 400).unwrap();
        let tf = TestFunctionSet::build(&time, 40, 40, 4, 4).unwrap();
        let sigma = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let normal = Normal::new(0.0, sigma).unwrap();
        let noise = Array2::from_shape_simple_fn((401, 500), || normal.sample(&mut rng));
        let out = weak_integral(noise.view(), &tf, false).unwrap();
        let n = out.len() as f64;
        let std = (out.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        let expected = sigma * time.dt.sqrt();
        assert!((std / expected - 1.0).abs() < 0.2, "{std} vs {expected}");
    }

    #[test]
    fn zero_coefficients_and_constant_latents_give_zero_residual() {
        let time = TimeGrid::new(1.0, 50).unwrap();
        let tf = TestFunctionSet::build(&time, 10, 5, 4, 4).unwrap();
        let lib = LibrarySpec::new(1).unwrap();
        let enc = identity_net(2);
        let dec = identity_net(2);
        let u = Array2::from_shape_fn((51, 2), |(_, c)| 0.4 + c as f64);
        let xi = Array2::zeros((3, 2));
        for variant in [WeakVariant::TypeI, WeakVariant::TypeII] {
            let terms =
                weak_residual_terms(&enc, &dec, &lib, xi.view(), &tf, u.view(), variant).unwrap();
            assert!(terms.z_lhs.iter().all(|v| v.abs() < 1e-12));
            assert!(terms.z_rhs.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn type_one_equals_type_two_for_linear_networks() {
        let time = TimeGrid::new(1.0, 60).unwrap();
        let tf = TestFunctionSet::build(&time, 12, 6, 4, 4).unwrap();
        let lib = LibrarySpec::new(2).unwrap();
        let enc = Mlp::init(&NetSpec::new(vec![3, 2]).unwrap(), 1);
        let dec = Mlp::init(&NetSpec::new(vec![2, 3]).unwrap(), 2);
        let u = Array2::from_shape_fn((61, 3), |(n, c)| ((n as f64) * 0.05 + c as f64).sin());
        let xi = Array2::from_shape_fn((6, 2), |(r, c)| 0.1 * (r as f64) - 0.2 * c as f64);
        let a = weak_residual_terms(
            &enc,
            &dec,
            &lib,
            xi.view(),
            &tf,
            u.view(),
            WeakVariant::TypeI,
        )
        .unwrap();
        let b = weak_residual_terms(
            &enc,
            &dec,
            &lib,
            xi.view(),
            &tf,
            u.view(),
            WeakVariant::TypeII,
        )
        .unwrap();
        let dz = &a.z_residual() - &b.z_residual();
        assert!(dz.iter().all(|d| d.abs() < 1e-12));
        // the decoded rates differ by the decoder applied to the latent residual
        let du = &a.u_residual() - &b.u_residual();
        let expect = a.z_residual().dot(&dec.layers[0].weight.t());
        assert!((&du - &expect).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn exponential_latent_residual_converges_at_second_order() {
        // z(t) = e^t, dz/dt = z: library (1, z) with Xi = [0, 1]^T
        let lib = LibrarySpec::new(1).unwrap();
        let enc = identity_net(1);
        let dec = identity_net(1);
        let xi = array![[0.0], [1.0]];
        let mut errs = Vec::new();
        for steps in [40usize, 80, 160, 320] {
            let time = TimeGrid::new(1.0, steps).unwrap();
            let tf = TestFunctionSet::build(&time, steps / 2, steps / 4, 4, 4).unwrap();
            let u = Array2::from_shape_fn((steps + 1, 1), |(n, _)| time.t(n).exp());
            let terms = weak_residual_terms(
                &enc,
                &dec,
                &lib,
                xi.view(),
                &tf,
                u.view(),
                WeakVariant::TypeII,
            )
            .unwrap();
            errs.push(
                terms
                    .z_residual()
                    .iter()
                    .map(|v| v.abs())
                    .fold(0.0, f64::max),
            );
        }
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order > 1.9, "{errs:?}");
        }
    }

    #[test]
    fn strong_residuals_vanish_for_static_data() {
        let lib = LibrarySpec::new(1).unwrap();
        let enc = Mlp::init(&NetSpec::new(vec![4, 6, 2]).unwrap(), 3);
        let dec = Mlp::init(&NetSpec::new(vec![2, 6, 4]).unwrap(), 4);
        let u = Array2::from_elem((10, 4), 0.3);
        let udot = Array2::zeros((10, 4));
        let xi = Array2::zeros((3, 2));
        let t = strong_residual_terms(&enc, &dec, &lib, xi.view(), u.view(), udot.view()).unwrap();
        assert!(t
            .z_residual()
            .iter()
            .chain(t.u_residual().iter())
            .all(|&v| v == 0.0));
    }

    #[test]
    fn strong_latent_residual_reduces_to_sindy_for_identity_nets() {
        let lib = LibrarySpec::new(1).unwrap();
        let enc = identity_net(2);
        let dec = identity_net(2);
        let time = TimeGrid::new(1.0, 40).unwrap();
        let u = Array2::from_shape_fn((41, 2), |(n, c)| {
            let t = time.t(n);
            if c == 0 {
                (-t).exp()
            } else {
                (0.5 * t).exp()
            }
        });
        let udot = central_difference(u.view(), time.dt).unwrap();
        // least squares fit of udot ~ Theta(u) Xi via normal equations
        let theta = lib.eval_batch(u.view());
        let xi = solve_normal(&theta, &udot);
        let t = strong_residual_terms(&enc, &dec, &lib, xi.view(), u.view(), udot.view()).unwrap();
        let sindy = &udot - &theta.dot(&xi);
        let d = &t.z_residual() - &sindy;
        assert!(d.iter().all(|v| v.abs() < 1e-12));
    }

    fn solve_normal(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        // tiny Gauss-Jordan on A^T A, enough for a 3x3 system
        let mut m = a.t().dot(a);
        let mut r = a.t().dot(b);
        let n = m.nrows();
        for i in 0..n {
            let p = m[(i, i)];
            for j in 0..n {
                m[(i, j)] /= p;
            }
            for j in 0..r.ncols() {
                r[(i, j)] /= p;
            }
            for k in 0..n {
                if k != i {
                    let f = m[(k, i)];
                    for j in 0..n {
                        m[(k, j)] -= f * m[(i, j)];
                    }
                    for j in 0..r.ncols() {
                        r[(k, j)] -= f * r[(i, j)];
                    }
                }
            }
        }
        r
    }

    #[test]
    fn finite_differences_amplify_noise() {
        let time = TimeGrid::new(1.0, 100).unwrap();
        let clean = Array2::from_shape_fn((101, 50), |(n, j)| (time.t(n) + 0.1 * j as f64).sin());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 0.05).unwrap();
        let noisy = &clean + &Array2::from_shape_simple_fn((101, 50), || normal.sample(&mut rng));
        let dc = central_difference(clean.view(), time.dt).unwrap();
        let dn = central_difference(noisy.view(), time.dt).unwrap();
        let std = |a: &Array2<f64>| {
            let m = a.mean().unwrap();
            (a.iter().map(|v| (v - m).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
        };
        assert!(std(&dn) > 3.0 * std(&dc), "{} vs {}", std(&dn), std(&dc));
    }
}
