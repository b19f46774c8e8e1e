mod common;

use common::oracles::svd_rank;
use common::{rng, uniform};
use proptest::prelude::*;
use rand::Rng;
use tsdistill::tensor::Tensor;
use tsdistill::vocab::{parse_matrix_csv, qr_reduce, write_matrix_csv, QrOptions, VocabEmbedding};

const RANK_TOL: f64 = 1e-10;

fn orthonormality_error(rows: &Tensor) -> f64 {
    let gram = rows.matmul(&rows.transpose()).unwrap();
    gram.max_abs_diff(&Tensor::identity(rows.rows()))
}

/// Instance `i` of the fixed 50-matrix suite: full-rank, low-rank products,
/// duplicated rows and zero columns, sizes up to 64×64.
fn instance(i: u64) -> Tensor {
    let mut r = rng(1000 + i);
    let rows = r.random_range(1..=64);
    let cols = r.random_range(1..=64);
    match i % 4 {
        0 => uniform(&mut r, rows, cols, -1.0, 1.0),
        1 => {
            let k = r.random_range(1..=rows.min(cols));
            let a = uniform(&mut r, rows, k, -1.0, 1.0);
            let b = uniform(&mut r, k, cols, -1.0, 1.0);
            a.matmul(&b).unwrap()
        }
        2 => {
            let base = uniform(&mut r, rows.div_ceil(2), cols, -1.0, 1.0);
            let data = (0..rows).flat_map(|j| base.row(j / 2).to_vec()).collect();
            Tensor::matrix(rows, cols, data)
        }
        _ => {
            let mut t = uniform(&mut r, rows, cols, -1.0, 1.0);
            for c in (0..cols).step_by(3) {
                for rr in 0..rows {
                    t.set(rr, c, 0.0);
                }
            }
            if t.data().iter().all(|&v| v == 0.0) {
                t.set(0, 0, 1.0);
            }
            t
        }
    }
}

#[test]
fn fifty_matrices_orthonormal_with_oracle_rank() {
    for i in 0..50 {
        let d = instance(i);
        let vocab = VocabEmbedding::new(d.clone()).unwrap();
        let oracle = svd_rank(&d, RANK_TOL);
        for pivoting in [false, true] {
            let opts = QrOptions {
                rank_tol: RANK_TOL,
                pivoting,
                ..QrOptions::default()
            };
            let pe = qr_reduce(&vocab, &opts).unwrap();
            let err = orthonormality_error(&pe.rows);
            assert!(err < 1e-10, "instance {i}: orthonormality error {err:e}");
            assert_eq!(pe.dim(), pe.detected_rank);
            assert_eq!(pe.width(), d.cols());
            // Unpivoted QR only reveals rank when the leading vocabulary rows
            // are in general position, which duplicated rows break.
            if pivoting || i % 4 != 2 {
                let (r, c) = (d.rows(), d.cols());
                assert_eq!(pe.detected_rank, oracle, "instance {i} ({r}×{c}) pivoting {pivoting}");
            }
        }
    }
}

#[test]
fn unpivoted_qr_undercounts_duplicated_leading_rows() {
    let mut r = rng(8);
    let base = uniform(&mut r, 3, 5, -1.0, 1.0);
    let d = Tensor::matrix(6, 5, (0..6).flat_map(|j| base.row(j / 2).to_vec()).collect());
    let vocab = VocabEmbedding::new(d.clone()).unwrap();
    let plain = qr_reduce(&vocab, &QrOptions::default()).unwrap();
    let pivoted = qr_reduce(&vocab, &QrOptions { pivoting: true, ..QrOptions::default() }).unwrap();
    assert_eq!(svd_rank(&d, RANK_TOL), 3);
    assert_eq!(pivoted.detected_rank, 3);
    assert!(plain.detected_rank <= 3);
}

#[test]
fn rows_span_the_dictionary_row_space() {
    let d = instance(1);
    let pe = qr_reduce(&VocabEmbedding::new(d.clone()).unwrap(), &QrOptions::default()).unwrap();
    // Projecting each vocabulary row onto span(D̂) reproduces it.
    let proj = d.matmul(&pe.rows.transpose()).unwrap().matmul(&pe.rows).unwrap();
    assert!(proj.max_abs_diff(&d) < 1e-9);
}

#[test]
fn oversized_request_pads_with_orthonormal_directions() {
    let mut r = rng(5);
    let a = uniform(&mut r, 10, 2, -1.0, 1.0);
    let b = uniform(&mut r, 2, 8, -1.0, 1.0);
    let d = a.matmul(&b).unwrap();
    let opts = QrOptions {
        rank: Some(5),
        ..QrOptions::default()
    };
    let pe = qr_reduce(&VocabEmbedding::new(d).unwrap(), &opts).unwrap();
    assert_eq!((pe.detected_rank, pe.dim()), (2, 5));
    assert!(orthonormality_error(&pe.rows) < 1e-10);
}

#[test]
fn anchor_cap_limits_rows() {
    let opts = QrOptions {
        max_anchors: Some(3),
        ..QrOptions::default()
    };
    let pe = qr_reduce(&VocabEmbedding::synthetic(1, 40, 8), &opts).unwrap();
    assert_eq!(pe.dim(), 3);
}

#[test]
fn zero_dictionary_is_an_error() {
    let err = qr_reduce(&VocabEmbedding::new(Tensor::zeros(&[4, 3])).unwrap(), &QrOptions::default());
    assert!(err.is_err());
}

#[test]
fn matrix_csv_round_trip_and_errors() {
    let m = uniform(&mut rng(2), 3, 4, -5.0, 5.0);
    let mut buf = Vec::new();
    write_matrix_csv(&m, &mut buf).unwrap();
    let back = parse_matrix_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
    assert_eq!(back, m);
    assert!(parse_matrix_csv("1,2\n3\n").is_err());
    assert!(parse_matrix_csv("1,x\n").is_err());
    assert!(parse_matrix_csv("").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn principal_rows_are_orthonormal(rows in 1usize..20, cols in 1usize..20, rank in 1usize..6, seed: u64) {
        let mut r = rng(seed);
        let k = rank.min(rows).min(cols);
        let d = uniform(&mut r, rows, k, -1.0, 1.0).matmul(&uniform(&mut r, k, cols, -1.0, 1.0)).unwrap();
        let pe = qr_reduce(&VocabEmbedding::new(d.clone()).unwrap(), &QrOptions { pivoting: true, ..QrOptions::default() }).unwrap();
        prop_assert!(orthonormality_error(&pe.rows) < 1e-10);
        prop_assert_eq!(pe.detected_rank, svd_rank(&d, RANK_TOL));
    }
}
