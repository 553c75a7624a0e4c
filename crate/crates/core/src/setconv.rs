//! Set convolutions between scattered points and a uniform grid.
//!
//! The encoder projects a context set onto the grid with Gaussian
//! similarity weights `w = exp(-(grid - x)² / 2ℓ²)`, producing a density
//! channel (total weight) and a signal channel (weight-normalized values).
//! The decoder reads grid features off at arbitrary query inputs by
//! normalized interpolation with the same kind of weights. Both are
//! permutation invariant in their point sets and translation covariant
//! with respect to shifts by whole grid spacings.

use crate::autodiff::{Graph, NdArray, Var};
use crate::error::{Error, Result};

/// Added to every normalizing denominator.
pub const DENSITY_EPS: f64 = 1e-8;

/// Slack when checking that points lie on the grid window.
const COVER_TOL: f64 = 1e-9;

/// A uniform discretization of the input axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    positions: Vec<f64>,
    spacing: f64,
}

impl Grid {
    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.positions[0]
    }

    pub fn last(&self) -> f64 {
        self.positions[self.positions.len() - 1]
    }

    pub fn covers(&self, x: f64) -> bool {
        x >= self.first() - COVER_TOL && x <= self.last() + COVER_TOL
    }

    fn check_covers(&self, xs: &[f64], what: &str) -> Result<()> {
        match xs.iter().find(|&&x| !self.covers(x)) {
            Some(x) => Err(Error::contract(format!(
                "{what} input {x} lies outside the grid [{}, {}]",
                self.first(),
                self.last()
            ))),
            None => Ok(()),
        }
    }
}

/// Uniform grid over `[x_min - margin, x_max + margin]` with spacing
/// `1 / points_per_unit` and `ceil(span * points_per_unit) + 1` nodes.
pub fn build_grid(x_min: f64, x_max: f64, points_per_unit: usize, margin: f64) -> Result<Grid> {
    if !(x_max > x_min) || !x_min.is_finite() || !x_max.is_finite() {
        return Err(Error::contract(format!("degenerate grid range [{x_min}, {x_max}]")));
    }
    if points_per_unit < 2 {
        return Err(Error::contract(format!("points_per_unit {points_per_unit} < 2")));
    }
    if !(margin >= 0.0) {
        return Err(Error::contract(format!("negative grid margin {margin}")));
    }
    let start = x_min - margin;
    let span = (x_max + margin) - start;
    let ppu = points_per_unit as f64;
    // The tolerance keeps exact multiples (span·ppu = 2.0) from rounding up.
    let s = (span * ppu - 1e-9).ceil() as usize + 1;
    let spacing = 1.0 / ppu;
    let positions = (0..s).map(|i| start + i as f64 * spacing).collect();
    Ok(Grid { positions, spacing })
}

/// Learnable length scale of a set convolution, stored as its logarithm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SetConvParams {
    pub log_length_scale: f64,
}

impl SetConvParams {
    /// Length scale of two grid spacings.
    pub fn for_resolution(points_per_unit: usize) -> Self {
        Self {
            log_length_scale: (2.0 / points_per_unit as f64).ln(),
        }
    }

    pub fn length_scale(&self) -> f64 {
        self.log_length_scale.exp()
    }
}

/// Functional features on a grid; channel 0 is the density channel.
#[derive(Clone, Debug, PartialEq)]
pub struct GridRepresentation {
    pub features: NdArray,
    pub grid: Grid,
}

impl GridRepresentation {
    pub fn density(&self) -> &[f64] {
        &self.features.data()[..self.grid.len()]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let s = self.grid.len();
        &self.features.data()[c * s..(c + 1) * s]
    }
}

/// `-1 / (2ℓ²)` as a graph node.
fn weight_coefficient(g: &mut Graph, log_length_scale: Var) -> Result<Var> {
    let t = g.scale(log_length_scale, -2.0)?;
    let inv_sq = g.exp(t)?;
    Ok(g.scale(inv_sq, -0.5)?)
}

/// Squared distances `[a.len(), b.len()]`.
fn squared_distances(a: &[f64], b: &[f64]) -> NdArray {
    let data = a
        .iter()
        .flat_map(|&u| b.iter().map(move |&v| (u - v) * (u - v)))
        .collect();
    NdArray::new(vec![a.len(), b.len()], data).expect("distance shape")
}

/// Differentiable encoder: `y_context` is a `[1, m]` node, the result is
/// the `[2, s]` (density, signal) representation.
pub fn encode_to_grid_var(
    g: &mut Graph,
    x_context: &[f64],
    y_context: Var,
    grid: &Grid,
    log_length_scale: Var,
) -> Result<Var> {
    let m = x_context.len();
    if g.shape(y_context) != [1, m] {
        return Err(Error::contract(format!(
            "context values have shape {:?}, expected [1, {m}]",
            g.shape(y_context)
        )));
    }
    grid.check_covers(x_context, "context")?;
    let coef = weight_coefficient(g, log_length_scale)?;
    let d2 = g.constant(squared_distances(x_context, grid.positions()));
    let scaled = g.mul(d2, coef)?;
    let weights = g.exp(scaled)?;
    let density = g.sum_axis(weights, 0)?;
    let numerator = g.matmul(y_context, weights)?;
    let safe = g.add_scalar(density, DENSITY_EPS)?;
    let signal = g.div(numerator, safe)?;
    Ok(g.concat(&[density, signal], 0)?)
}

/// Differentiable decoder: normalized interpolation of `[c, s]` grid
/// features at `x_query`, giving `[c, q]`.
pub fn decode_from_grid_var(
    g: &mut Graph,
    features: Var,
    grid: &Grid,
    x_query: &[f64],
    log_length_scale: Var,
) -> Result<Var> {
    let shape = g.shape(features);
    if shape.len() != 2 || shape[1] != grid.len() {
        return Err(Error::contract(format!(
            "features of shape {shape:?} do not live on a {}-point grid",
            grid.len()
        )));
    }
    grid.check_covers(x_query, "query")?;
    let coef = weight_coefficient(g, log_length_scale)?;
    let d2 = g.constant(squared_distances(grid.positions(), x_query));
    let scaled = g.mul(d2, coef)?;
    let weights = g.exp(scaled)?;
    let numerator = g.matmul(features, weights)?;
    let total = g.sum_axis(weights, 0)?;
    let safe = g.add_scalar(total, DENSITY_EPS)?;
    Ok(g.div(numerator, safe)?)
}

/// Projects a context set onto `grid`.
pub fn encode_to_grid(
    x_context: &NdArray,
    y_context: &NdArray,
    grid: &Grid,
    params: &SetConvParams,
) -> Result<GridRepresentation> {
    if x_context.len() != y_context.len() {
        return Err(Error::contract("context inputs and values differ in length"));
    }
    let mut g = Graph::new();
    let y = g.constant(NdArray::row(y_context.data().to_vec()));
    let ls = g.constant(NdArray::scalar(params.log_length_scale));
    let out = encode_to_grid_var(&mut g, x_context.data(), y, grid, ls)?;
    Ok(GridRepresentation {
        features: g.value(out).clone(),
        grid: grid.clone(),
    })
}

/// Reads `[c, s]` grid features off at `x_query`.
pub fn decode_from_grid(features: &NdArray, grid: &Grid, x_query: &NdArray, params: &SetConvParams) -> Result<NdArray> {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let ls = g.constant(NdArray::scalar(params.log_length_scale));
    let out = decode_from_grid_var(&mut g, f, grid, x_query.data(), ls)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng as _, SeedableRng};

    use super::*;
    use crate::seed::Rng;

    fn params(ls: f64) -> SetConvParams {
        SetConvParams {
            log_length_scale: ls.ln(),
        }
    }

    /// Direct double loop over the weight formula.
    fn oracle_encode(xc: &[f64], yc: &[f64], grid: &Grid, ls: f64) -> (Vec<f64>, Vec<f64>) {
        let mut density = vec![0.0; grid.len()];
        let mut signal = vec![0.0; grid.len()];
        for (j, &gp) in grid.positions().iter().enumerate() {
            let mut num = 0.0;
            for (&x, &y) in xc.iter().zip(yc) {
                let w = (-(gp - x).powi(2) / (2.0 * ls * ls)).exp();
                density[j] += w;
                num += w * y;
            }
            signal[j] = num / (density[j] + DENSITY_EPS);
        }
        (density, signal)
    }

    #[test]
    fn grid_size_rule() {
        let g = build_grid(-1.0, 1.0, 32, 0.1).unwrap();
        assert_eq!(g.spacing(), 0.031_25);
        assert_eq!(g.len(), 72);
        assert!((g.first() + 1.1).abs() < 1e-15);
        assert!(g.last() >= 1.1);
    }

    #[test]
    fn three_point_grid() {
        let g = build_grid(3.0, 4.0, 2, 0.0).unwrap();
        assert_eq!(g.positions(), &[3.0, 3.5, 4.0]);
    }

    #[test]
    fn degenerate_grid_rejected() {
        assert!(build_grid(1.0, 1.0, 32, 0.1).is_err());
        assert!(build_grid(0.0, 1.0, 1, 0.1).is_err());
        assert!(build_grid(0.0, 1.0, 8, -0.1).is_err());
    }

    #[test]
    fn uniform_spacing() {
        let g = build_grid(-1.3, 2.9, 17, 0.25).unwrap();
        for w in g.positions().windows(2) {
            assert!((w[1] - w[0] - g.spacing()).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_context_is_all_zero() {
        let grid = build_grid(-1.0, 1.0, 16, 0.1).unwrap();
        let rep = encode_to_grid(&NdArray::vector(vec![]), &NdArray::vector(vec![]), &grid, &params(0.1)).unwrap();
        assert_eq!(rep.features.shape(), &[2, grid.len()]);
        assert!(rep.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_point_on_node_narrow_kernel() {
        let grid = build_grid(-1.0, 1.0, 16, 0.0).unwrap();
        let j = 10;
        let x = grid.positions()[j];
        let rep = encode_to_grid(
            &NdArray::vector(vec![x]),
            &NdArray::vector(vec![2.0]),
            &grid,
            &params(1e-3),
        )
        .unwrap();
        for k in 0..grid.len() {
            let (d, s) = (rep.density()[k], rep.channel(1)[k]);
            if k == j {
                assert!((d - 1.0).abs() < 1e-12 && (s - 2.0).abs() < 1e-7);
            } else {
                assert_eq!((d, s), (0.0, 0.0));
            }
        }
    }

    #[test]
    fn encoder_matches_double_loop() {
        let mut rng = Rng::seed_from_u64(4);
        let grid = build_grid(-1.0, 1.0, 32, 0.1).unwrap();
        for _ in 0..10 {
            let m = rng.random_range(1..30);
            let xc: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let yc: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
            let ls = rng.random_range(0.02..0.3);
            let rep = encode_to_grid(
                &NdArray::vector(xc.clone()),
                &NdArray::vector(yc.clone()),
                &grid,
                &params(ls),
            )
            .unwrap();
            let (d, s) = oracle_encode(&xc, &yc, &grid, ls);
            for k in 0..grid.len() {
                assert!((rep.density()[k] - d[k]).abs() < 1e-12);
                assert!((rep.channel(1)[k] - s[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn context_outside_grid_rejected() {
        let grid = build_grid(-1.0, 1.0, 16, 0.1).unwrap();
        let r = encode_to_grid(
            &NdArray::vector(vec![1.5]),
            &NdArray::vector(vec![0.0]),
            &grid,
            &params(0.1),
        );
        assert!(matches!(r, Err(Error::Contract(_))));
        let f = NdArray::zeros(&[1, grid.len()]);
        assert!(decode_from_grid(&f, &grid, &NdArray::vector(vec![-1.2]), &params(0.1)).is_err());
    }

    #[test]
    fn decode_at_node_with_narrow_kernel() {
        let grid = build_grid(0.0, 1.0, 8, 0.0).unwrap();
        let features = NdArray::new(
            vec![2, grid.len()],
            (0..2 * grid.len()).map(|i| i as f64 * 0.5 - 1.0).collect(),
        )
        .unwrap();
        let k = 3;
        let out = decode_from_grid(
            &features,
            &grid,
            &NdArray::vector(vec![grid.positions()[k]]),
            &params(1e-3),
        )
        .unwrap();
        assert!((out.at(0, 0) - features.at(0, k)).abs() < 1e-7);
        assert!((out.at(1, 0) - features.at(1, k)).abs() < 1e-7);
    }

    #[test]
    fn decode_constant_features() {
        let grid = build_grid(-1.0, 1.0, 32, 0.1).unwrap();
        let features = NdArray::full(&[3, grid.len()], 1.7);
        let q = NdArray::vector(vec![-1.0, -0.33, 0.0, 0.5, 1.0]);
        let out = decode_from_grid(&features, &grid, &q, &params(0.0625)).unwrap();
        assert!(out.data().iter().all(|v| (v - 1.7).abs() < 1e-7));
    }

    #[test]
    fn decoding_own_signal_recovers_context() {
        let mut rng = Rng::seed_from_u64(8);
        let grid = build_grid(-1.0, 1.0, 32, 0.1).unwrap();
        let p = params(grid.spacing());
        for _ in 0..20 {
            // well-separated context points on a smooth function
            let m = rng.random_range(2..7);
            let mut xc: Vec<f64> = (0..m)
                .map(|i| -0.9 + 1.8 * (i as f64 + rng.random_range(0.2..0.8)) / m as f64)
                .collect();
            xc.shuffle(&mut rng);
            let yc: Vec<f64> = xc.iter().map(|x| (3.0 * x).sin()).collect();
            let xs = NdArray::vector(xc.clone());
            let rep = encode_to_grid(&xs, &NdArray::vector(yc.clone()), &grid, &p).unwrap();
            let signal = NdArray::row(rep.channel(1).to_vec());
            let back = decode_from_grid(&signal, &grid, &xs, &p).unwrap();
            for (b, y) in back.data().iter().zip(&yc) {
                assert!((b - y).abs() < 0.05, "{b} vs {y}");
            }
        }
    }

    #[test]
    fn density_mass_accounting() {
        let grid = build_grid(-1.0, 1.0, 32, 0.5).unwrap();
        let ls = 0.05;
        let xc = vec![-0.8, -0.1, 0.35, 0.9];
        let rep = encode_to_grid(
            &NdArray::vector(xc.clone()),
            &NdArray::vector(vec![0.0; 4]),
            &grid,
            &params(ls),
        )
        .unwrap();
        let total: f64 = rep.density().iter().sum();
        let expected = xc.len() as f64 * ls * (2.0 * std::f64::consts::PI).sqrt() / grid.spacing();
        assert!((total / expected - 1.0).abs() < 0.02, "{total} vs {expected}");
    }

    #[test]
    fn integer_shift_shifts_columns() {
        let grid = build_grid(-2.0, 2.0, 16, 0.0).unwrap();
        let xc = vec![-0.7, 0.05, 0.4];
        let yc = NdArray::vector(vec![1.0, -2.0, 0.5]);
        let k = 5;
        let shifted: Vec<f64> = xc.iter().map(|x| x + k as f64 * grid.spacing()).collect();
        let p = params(0.1);
        let a = encode_to_grid(&NdArray::vector(xc), &yc, &grid, &p).unwrap();
        let b = encode_to_grid(&NdArray::vector(shifted), &yc, &grid, &p).unwrap();
        for c in 0..2 {
            for j in 10..grid.len() - k - 10 {
                assert!((a.channel(c)[j] - b.channel(c)[j + k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn length_scale_gradient_matches_fd() {
        let grid = build_grid(-1.0, 1.0, 8, 0.1).unwrap();
        let xc = [-0.5, 0.2, 0.7];
        let xq = [-0.9, 0.0, 0.33, 1.0];
        let params = std::collections::BTreeMap::from([
            ("ls".to_string(), NdArray::scalar((0.2f64).ln())),
            ("y".to_string(), NdArray::row(vec![0.4, -1.0, 2.0])),
        ]);
        let errs = crate::autodiff::check_gradients(
            &params,
            |g, v| {
                let enc = encode_to_grid_var(g, &xc, v["y"], &grid, v["ls"]).map_err(to_ad)?;
                let dec = decode_from_grid_var(g, enc, &grid, &xq, v["ls"]).map_err(to_ad)?;
                let sq = g.square(dec)?;
                g.sum(sq)
            },
            1e-5,
        )
        .unwrap();
        assert!(errs.values().all(|&e| e < 1e-6), "{errs:?}");
    }

    fn to_ad(e: Error) -> crate::autodiff::AutogradError {
        match e {
            Error::Autograd(a) => a,
            other => crate::autodiff::AutogradError::Contract(other.to_string()),
        }
    }

    proptest! {
        #[test]
        fn encoder_permutation_invariant(seed in any::<u64>(), m in 1usize..25) {
            let mut rng = Rng::seed_from_u64(seed);
            let grid = build_grid(-1.0, 1.0, 32, 0.1).unwrap();
            let mut pts: Vec<(f64, f64)> = (0..m).map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-3.0..3.0))).collect();
            let enc = |pts: &[(f64, f64)]| {
                let (x, y): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
                encode_to_grid(&NdArray::vector(x), &NdArray::vector(y), &grid, &params(0.07)).unwrap()
            };
            let a = enc(&pts);
            pts.shuffle(&mut rng);
            let b = enc(&pts);
            prop_assert!(a.features.max_abs_diff(&b.features).unwrap() < 1e-12);
            prop_assert!(a.density().iter().all(|&d| d >= 0.0));
        }

        #[test]
        fn decoder_permutes_with_queries(seed in any::<u64>(), q in 1usize..20) {
            let mut rng = Rng::seed_from_u64(seed);
            let grid = build_grid(-1.0, 1.0, 16, 0.1).unwrap();
            let features = NdArray::new(vec![2, grid.len()], (0..2 * grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let xq: Vec<f64> = (0..q).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut perm: Vec<usize> = (0..q).collect();
            perm.shuffle(&mut rng);
            let xp: Vec<f64> = perm.iter().map(|&i| xq[i]).collect();
            let a = decode_from_grid(&features, &grid, &NdArray::vector(xq), &params(0.1)).unwrap();
            let b = decode_from_grid(&features, &grid, &NdArray::vector(xp), &params(0.1)).unwrap();
            for c in 0..2 {
                for (j, &i) in perm.iter().enumerate() {
                    prop_assert!((b.at(c, j) - a.at(c, i)).abs() < 1e-12);
                }
            }
        }
    }
}
