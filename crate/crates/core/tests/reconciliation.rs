//! Exhaustive studies in exact arithmetic against the closed-form oracles.

use blockvar::estimators::EstimatorId;
use blockvar::oracle::{bias_finite, ignore_blocking_bias_finite, true_var_finite, Design, Mechanism, ScienceBlock};
use blockvar::simulate::{monte_carlo_study, StudyMode, DEFAULT_ENUMERATION_CAP};
use blockvar::{ExactScience, Rational};

fn q(v: i64) -> Rational {
    Rational::from_integer(v.into())
}

fn science(blocks: &[(&str, &[i64], &[i64])]) -> ExactScience {
    ExactScience::from_blocks(
        blocks
            .iter()
            .map(|(id, y0, y1)| ScienceBlock {
                block_id: id.to_string(),
                y0: y0.iter().map(|&v| q(v)).collect(),
                y1: y1.iter().map(|&v| q(v)).collect(),
            })
            .collect(),
    )
    .unwrap()
}

const EXHAUSTIVE: StudyMode = StudyMode::Exhaustive { cap: DEFAULT_ENUMERATION_CAP };

#[test]
fn hybrid_study_matches_every_oracle() {
    let sci = science(&[
        ("a", &[1, 4], &[3, 3]),
        ("b", &[0, 2], &[5, 9]),
        ("c", &[2, 2, 7], &[4, 1, 8]),
        ("d", &[3, 1, 4, 1], &[5, 9, 2, 6]),
        ("e", &[0, 1, 0, 2, 2], &[2, 2, 3, 5, 1]),
    ]);
    let design = Design::from_counts(&sci, &[1, 1, 1, 2, 2]).unwrap();
    let ids = [EstimatorId::SbP, EstimatorId::HybridP, EstimatorId::RctYes, EstimatorId::RctYes2, EstimatorId::Plugin];
    let study = monte_carlo_study(&sci, &design, &ids, Mechanism::Blocked, EXHAUSTIVE).unwrap();
    assert_eq!(study.reps, 2 * 2 * 3 * 6 * 10);
    let truth = true_var_finite(&sci, &design, Mechanism::Blocked).unwrap();
    for row in &study.rows {
        assert_eq!(row.mean_tau, sci.sate());
        assert_eq!(row.var_tau, truth);
        assert_eq!(row.bias, bias_finite(&sci, &design, row.estimator).unwrap(), "{}", row.estimator);
    }
    assert_eq!(study.rows.len(), ids.len());
}

#[test]
fn matched_pairs_unbiased_only_for_constant_effects() {
    let constant = science(&[("p1", &[1, 5], &[3, 7]), ("p2", &[4, 0], &[6, 2]), ("p3", &[9, 8], &[11, 10])]);
    let varying = science(&[("p1", &[1, 5], &[3, 7]), ("p2", &[4, 0], &[9, 5]), ("p3", &[9, 8], &[10, 9])]);
    for (sci, unbiased) in [(constant, true), (varying, false)] {
        let design = Design::from_counts(&sci, &[1, 1, 1]).unwrap();
        let study =
            monte_carlo_study(&sci, &design, &[EstimatorId::SbEqual], Mechanism::Blocked, EXHAUSTIVE).unwrap();
        let bias = &study.rows[0].bias;
        assert_eq!(*bias == q(0), unbiased);
        assert!(*bias >= q(0));
    }
}

#[test]
fn complete_randomization_bias_is_heterogeneity_over_n() {
    let sci = science(&[("a", &[1, 2, 6], &[2, 2, 9]), ("b", &[0, 3, 3, 5], &[4, 3, 1, 5])]);
    let design = Design::from_counts(&sci, &[1, 2]).unwrap();
    let study = monte_carlo_study(&sci, &design, &[EstimatorId::Cr], Mechanism::Complete, EXHAUSTIVE).unwrap();
    assert_eq!(study.reps, 35);
    let row = &study.rows[0];
    assert_eq!(row.var_tau, true_var_finite(&sci, &design, Mechanism::Complete).unwrap());
    assert_eq!(row.bias, bias_finite(&sci, &design, EstimatorId::Cr).unwrap());
}

#[test]
fn ignoring_blocking_matches_closed_form() {
    let sci = science(&[("a", &[0, 4, 8, 12], &[3, 6, 12, 14]), ("b", &[1, 5, 9, 13], &[4, 9, 11, 16])]);
    let design = Design::from_counts(&sci, &[2, 2]).unwrap();
    let study = monte_carlo_study(&sci, &design, &[EstimatorId::Cr], Mechanism::Blocked, EXHAUSTIVE).unwrap();
    assert_eq!(study.rows[0].bias, ignore_blocking_bias_finite(&sci, &design).unwrap());
}

#[test]
fn enumeration_cap_is_enforced() {
    let sci = science(&[("a", &[0; 12], &[0; 12]), ("b", &[0; 12], &[0; 12])]);
    let design = Design::from_counts(&sci, &[6, 6]).unwrap();
    let err = monte_carlo_study(&sci, &design, &[EstimatorId::Big], Mechanism::Blocked, StudyMode::Exhaustive { cap: 1000 });
    assert!(err.is_err());
}
