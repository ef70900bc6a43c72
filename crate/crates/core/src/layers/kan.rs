use crate::autodiff::{BsplineGrid, Ctx, Float, ParamId, Var};
use crate::error::{Error, Result};

use super::Builder;

pub const KAN_GRID_SIZE: usize = 5;
pub const KAN_ORDER: usize = 3;

/// Kolmogorov–Arnold dense layer. Every edge `(i, j)` carries its own
/// activation `φ_ij(x) = w_ij·silu(x) + Σ_k c_ijk·B_k(x)` with cubic
/// B-splines on a uniform 5-interval grid over `[−1, 1]`; output `j` is
/// `Σ_i φ_ij(x_i)`. There is no bias.
///
/// Inputs outside `[−1, 1]` are evaluated on the polynomial piece of the
/// nearest boundary interval.
pub struct DenseKan {
    pub name: String,
    /// `(input, units)`
    pub base_weight: ParamId,
    /// `(input · (grid_size + order), units)`; row `i·(G+K) + k` holds `c_i·k`.
    pub spline_coeffs: ParamId,
    pub grid: BsplineGrid,
    pub input: usize,
    pub units: usize,
}

impl DenseKan {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, name: &str, input: usize, units: usize) -> Result<Self> {
        let grid = BsplineGrid::new(KAN_GRID_SIZE, KAN_ORDER, -1.0, 1.0)?;
        if input == 0 || units == 0 {
            return Err(Error::InvalidArgument(format!("{name}: empty KAN layer")));
        }
        let nb = grid.basis_len();
        Ok(DenseKan {
            name: name.to_string(),
            base_weight: b.glorot(&format!("{name}.base_weight"), &[input, units], input, units),
            spline_coeffs: b.uniform(
                &format!("{name}.spline_coeffs"),
                &[input * nb, units],
                0.1 / (input as f64).sqrt(),
            ),
            grid,
            input,
            units,
        })
    }

    pub fn param_count(input: usize, units: usize) -> usize {
        units * input * (1 + KAN_GRID_SIZE + KAN_ORDER)
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.base_weight);
        let c = ctx.param(self.spline_coeffs);
        let act = ctx.tape.silu(x);
        let base = ctx.tape.matmul(act, w)?;
        let basis = ctx.tape.bspline_basis(x, self.grid)?;
        let spline = ctx.tape.matmul(basis, c)?;
        let y = ctx.tape.add(base, spline)?;
        ctx.record(&self.name, y);
        Ok(y)
    }
}
