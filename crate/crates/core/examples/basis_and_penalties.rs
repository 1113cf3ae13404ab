//! The building blocks of every smooth term: cubic B-splines, difference
//! penalties, the sum-to-zero reparameterization and the anisotropic
//! penalty of functional random intercepts.
//!
//! `cargo run --example basis_and_penalties`

use flexjm::basis::{
    anisotropic_penalty, bspline_design, difference_matrix, difference_penalty, row_tensor, sum_to_zero, PenaltyDef,
    SplineBasisDef,
};
use nalgebra::DMatrix;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // 12 equidistant knots on [0, 60]: 4 interior, D = 12 - 4 = 8 functions
    let def = SplineBasisDef::equidistant(0.0, 60.0, 12, 3)?;
    let t: Vec<f64> = (0..=30).map(|k| 2.0 * k as f64).collect();
    let x = bspline_design(&def, &t)?;
    println!("basis: {} x {} (D = {})", x.nrows(), x.ncols(), def.n_basis());
    let worst = x.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
    println!("partition of unity: max |row sum - 1| = {worst:.2e}");

    let d2 = difference_matrix(def.n_basis(), 2)?;
    let k = difference_penalty(def.n_basis(), 2)?;
    println!("second differences D2: {} x {}", d2.nrows(), d2.ncols());
    println!("K = D2'D2 has rank {} (null space: constants and linear trends)", k.rank());
    let linear = DMatrix::from_fn(def.n_basis(), 1, |i, _| i as f64);
    println!("linear coefficients are unpenalized: b'Kb = {:.2e}", (linear.transpose() * k.matrix() * &linear)[(0, 0)]);

    let (x_dot, k_dot, z) = sum_to_zero(&x, &k)?;
    let colsum = x_dot.row_sum().abs().max();
    println!("constrained basis: {} columns, max |column sum| = {colsum:.2e}, Z is {} x {}", x_dot.ncols(), z.z.nrows(), z.z.ncols());
    println!("constrained penalty rank {}", k_dot.rank());

    // functional random intercepts for 3 subjects: K_s = I_3, K_t = K_dot
    let n = 3;
    let subject = [0usize, 0, 1, 2, 2, 2];
    let times = [0.0, 10.0, 4.0, 0.0, 20.0, 40.0];
    let xs = DMatrix::from_fn(subject.len(), n, |r, c| f64::from(subject[r] == c));
    let xt = sum_to_zero(&bspline_design(&def, &times)?, &k)?.0;
    let tensor = row_tensor(&xs, &xt)?;
    println!("row tensor: {} x {} (n x D' = {} x {})", tensor.nrows(), tensor.ncols(), n, xt.ncols());
    let k_s = PenaltyDef::identity(n).matrix().clone();
    let p = anisotropic_penalty(&k_s, k_dot.matrix(), 1.0, 0.2)?;
    let eig = p.clone().symmetric_eigen().eigenvalues;
    println!(
        "anisotropic precision {} x {}: smallest eigenvalue {:.3} (positive: K_s = I)",
        p.nrows(),
        p.ncols(),
        eig.min()
    );
    Ok(())
}
