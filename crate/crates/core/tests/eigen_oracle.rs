//! The hand-written eigensolver and PCA against nalgebra.

use digress_core::rng;
use digress_core::timestep::{first_component, jacobi_eigen};
use nalgebra::{DMatrix, SymmetricEigen};

fn random_symmetric(n: usize, seed: u64) -> Vec<f64> {
    let m = rng::normal_tensor(&mut rng::seeded(seed), &[n, n]);
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = m.data()[i * n + j] + m.data()[j * n + i];
        }
    }
    a
}

#[test]
fn jacobi_matches_nalgebra_spectrum() {
    for (n, seed) in [(2, 1), (5, 2), (9, 3), (16, 4)] {
        let a = random_symmetric(n, seed);
        let (mut ours, vectors) = jacobi_eigen(a.clone(), n);
        let reference = SymmetricEigen::new(DMatrix::from_row_slice(n, n, &a));
        let mut theirs: Vec<f64> = reference.eigenvalues.iter().copied().collect();
        ours.sort_by(f64::total_cmp);
        theirs.sort_by(f64::total_cmp);
        for (x, y) in ours.iter().zip(&theirs) {
            assert!((x - y).abs() < 1e-9 * (1.0 + y.abs()), "n={n}: {x} vs {y}");
        }
        // A v = lambda v for every returned pair.
        let (values, _) = jacobi_eigen(a.clone(), n);
        for k in 0..n {
            for i in 0..n {
                let av: f64 = (0..n).map(|j| a[i * n + j] * vectors[j * n + k]).sum();
                assert!((av - values[k] * vectors[i * n + k]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn first_component_matches_nalgebra_svd() {
    for (n, d, seed) in [(4, 30, 7), (12, 50, 8), (25, 10, 9)] {
        let data = rng::normal_tensor(&mut rng::seeded(seed), &[n, d]);
        let rows: Vec<&[f64]> = data.data().chunks(d).collect();
        let pca = first_component(&rows);
        let norm: f64 = pca.component.iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);

        let mut centred = DMatrix::from_row_slice(n, d, data.data());
        let mean = centred.row_mean();
        for mut r in centred.row_iter_mut() {
            r -= &mean;
        }
        let svd = centred.clone().svd(false, true);
        let top = svd.singular_values.imax();
        let v = svd.v_t.unwrap().row(top).transpose();
        let dot: f64 = pca.component.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-9, "alignment {dot}");
        let s = svd.singular_values[top];
        assert!((pca.eigenvalue - s * s / n as f64).abs() < 1e-9 * (1.0 + pca.eigenvalue));
        let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
        assert!((pca.explained_ratio - s * s / total).abs() < 1e-9);
    }
}
