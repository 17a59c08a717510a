mod support;

use adret::evaluation::{ensemble_similarity, recall_at_k, GroundTruth};
use adret::objectives::{adopt_loss, alignment, hard_triplet_loss, info_nce_loss, select_negatives, uniformity};
use adret::pooling::{balance_combine, embedding_level_adpool, max_pool};
use adret::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::oracles;

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

#[test]
fn losses_match_scalar_reimplementations() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..40 {
        let s = Matrix::random_uniform(8, 8, -1.0, 1.0, &mut rng);
        let r = rows(&s);

        let (t, _) = hard_triplet_loss(&s, 0.2).unwrap();
        assert!((t - oracles::triplet(&r, 0.2)).abs() <= 1e-12);

        for k in [1, 3, 7] {
            let (l, _) = info_nce_loss(&s, &select_negatives(&s, k).unwrap(), 0.05).unwrap();
            let want = oracles::info_nce(&r, k, 0.05);
            assert!((l - want).abs() <= 1e-12 * want.max(1.0), "k={k}: {l} vs {want}");
        }

        assert!((alignment(&s).unwrap() - oracles::alignment(&r)).abs() <= 1e-12);
        assert!((uniformity(&s).unwrap() - oracles::uniformity(&r)).abs() <= 1e-12);
        let (l, maturity, _) = adopt_loss(&s, 0.05).unwrap();
        let (want, k) = oracles::adopt(&r, 0.05);
        assert_eq!(maturity.k_selected, k);
        assert!((l - want).abs() <= 1e-12 * want.max(1.0));
    }
}

#[test]
fn selection_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let s = Matrix::random_uniform(6, 6, -1.0, 1.0, &mut rng);
        let r = rows(&s);
        let sel = select_negatives(&s, 3).unwrap();
        for i in 0..6 {
            assert_eq!(sel.text_to_image[i], oracles::hardest(&r, i, 3, true));
            assert_eq!(sel.image_to_text[i], oracles::hardest(&r, i, 3, false));
        }
    }
}

#[test]
fn worked_loss_examples() {
    let s = Matrix::from_rows(&[[0.9, 0.2], [0.3, 0.8]]).unwrap();
    assert_eq!(hard_triplet_loss(&s, 0.2).unwrap().0, 0.0);
    let s = Matrix::from_rows(&[[0.5, 0.6], [0.4, 0.7]]).unwrap();
    assert!((hard_triplet_loss(&s, 0.2).unwrap().0 - 0.5).abs() <= 1e-15);
    let eye = Matrix::identity(2);
    let (l, _) = info_nce_loss(&eye, &select_negatives(&eye, 1).unwrap(), 1.0).unwrap();
    assert!((l - 2.0 * (-1f64).exp().ln_1p()).abs() <= 1e-12);
}

#[test]
fn recall_matches_brute_force_argsort() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        // coarse values make ties common, which exercises the tie rule
        let s = Matrix::random_uniform(20, 20, 0.0, 1.0, &mut rng).map(|v| (v * 8.0).floor() / 8.0);
        let relevant: Vec<Vec<usize>> =
            (0..20).map(|_| (0..rng.random_range(1..=3)).map(|_| rng.random_range(0..20)).collect()).collect();
        let truth = GroundTruth::new(relevant.clone());
        for k in [1, 5, 10] {
            assert_eq!(recall_at_k(&s, &truth, k).unwrap(), oracles::recall(&rows(&s), &relevant, k));
        }
    }
}

#[test]
fn ensemble_of_identical_matrices_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = Matrix::random_uniform(7, 5, -1.0, 1.0, &mut rng);
    for n in 1..5 {
        assert_eq!(ensemble_similarity(&vec![s.clone(); n]).unwrap(), s);
    }
}

#[test]
fn embedding_level_approaches_max_when_sharpened() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    while checked < 100 {
        let f = Matrix::random_normal(rng.random_range(2..10), 4, 1.0, &mut rng);
        // the limit needs column maxima separated from the runner-up
        let separated = (0..f.cols()).all(|c| {
            let col = f.column(c);
            let order = oracles::argsort_desc(&col);
            col[order[0]] - col[order[1]] >= 0.3
        });
        if !separated {
            continue;
        }
        let (t, _) = embedding_level_adpool(&f.scale(50.0)).unwrap();
        for (a, b) in t.iter().zip(max_pool(&f).unwrap()) {
            assert!((a / 50.0 - b).abs() <= 1e-6, "{a} vs {b}");
        }
        checked += 1;
    }
}

#[test]
fn balance_of_equal_branches_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let t = Matrix::random_normal(1, 6, 1.0, &mut rng);
        let w = Matrix::random_normal(6, 1, 2.0, &mut rng);
        let (out, omega) = balance_combine(t.data(), t.data(), &w).unwrap();
        assert!((omega[0] + omega[1] - 1.0).abs() <= 1e-12);
        for (a, b) in out.iter().zip(t.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}
