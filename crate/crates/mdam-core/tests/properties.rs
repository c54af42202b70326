//! Property tests for structural invariants: apportionment error bounds,
//! dataset round trips, the respondent partition, dummy expansion dimension
//! and generated missingness structure.

use std::sync::Arc;

use proptest::prelude::*;

use mdam_core::augment::largest_remainder;
use mdam_core::data::{
    load_dataset, nonresponse_rates, write_dataset, CategoricalVariable, LoadOptions, SurveyRecord,
    SurveyDataset, UnitRowRule, VarId, VarRole, VariableSchema, MISSING,
};
use mdam_core::simgen::{enumerate_joint, generate_scenario, BinSel, ScenarioTruth};
use mdam_core::spec::{LinearPredictorSpec, Term};

fn two_var_schema(k1: usize, k2: usize) -> Arc<VariableSchema> {
    Arc::new(
        VariableSchema::new(vec![
            CategoricalVariable {
                name: "a".into(),
                levels: (0..k1).map(|i| format!("a{i}")).collect(),
                role: VarRole::Y,
                ordinal: false,
                always_observed: false,
            },
            CategoricalVariable {
                name: "b".into(),
                levels: (0..k2).map(|i| format!("b{i}")).collect(),
                role: VarRole::Y,
                ordinal: false,
                always_observed: false,
            },
        ])
        .unwrap(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn apportionment_sums_and_bounds(
        raw in prop::collection::vec(0.01f64..1.0, 2..6),
        size in 1u64..20_000,
    ) {
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
        let counts = largest_remainder(&probs, size);
        prop_assert_eq!(counts.iter().sum::<u64>(), size);
        for (c, p) in counts.iter().zip(&probs) {
            prop_assert!((*c as f64 / size as f64 - p).abs() < 1.0 / size as f64);
        }
    }

    #[test]
    fn dataset_write_load_round_trip(
        rows in prop::collection::vec((0u8..3, 0u8..4, prop::bool::ANY, prop::bool::ANY), 1..60),
    ) {
        let schema = two_var_schema(3, 4);
        let records: Vec<SurveyRecord> = rows
            .iter()
            .map(|&(a, b, miss_a, miss_b)| {
                SurveyRecord::respondent(vec![
                    if miss_a { MISSING } else { a },
                    if miss_b { MISSING } else { b },
                ])
            })
            .collect();
        let d = SurveyDataset::new(schema.clone(), records).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("one.csv");
        let p2 = dir.path().join("two.csv");
        write_dataset(&d, &p1, "NA").unwrap();
        let opts = LoadOptions {
            unit_rule: UnitRowRule::Column("U".into()),
            ..LoadOptions::default()
        };
        let loaded = load_dataset(&p1, schema, &opts).unwrap();
        prop_assert_eq!(loaded.records(), d.records());
        write_dataset(&loaded, &p2, "NA").unwrap();
        prop_assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn respondent_partition_counts(
        rows in prop::collection::vec((0u8..2, 0u8..2, 0u8..4), 1..80),
    ) {
        // code 0: complete, 1: miss a, 2: miss b, 3: unit row
        let schema = two_var_schema(2, 2);
        let records: Vec<SurveyRecord> = rows
            .iter()
            .map(|&(a, b, kind)| match kind {
                0 => SurveyRecord::respondent(vec![a, b]),
                1 => SurveyRecord::respondent(vec![MISSING, b]),
                2 => SurveyRecord::respondent(vec![a, MISSING]),
                _ => SurveyRecord::unit_nonrespondent(vec![MISSING, MISSING]),
            })
            .collect();
        let d = SurveyDataset::new(schema, records).unwrap();
        let units = d.n_unit_rows();
        let complete = d
            .records()
            .iter()
            .filter(|r| r.is_respondent() && r.values().iter().all(|&v| v != MISSING))
            .count();
        let item_missing = d
            .records()
            .iter()
            .filter(|r| r.is_respondent() && r.values().iter().any(|&v| v == MISSING))
            .count();
        prop_assert_eq!(units + complete + item_missing, d.len());
        // Rates are consistent with the same partition.
        let rates = nonresponse_rates(&d, None).unwrap();
        prop_assert_eq!(rates[0].total_rows, d.len());
        prop_assert_eq!(rates[0].unit_rows, units);
    }

    #[test]
    fn dummy_expansion_dimension(
        k1 in 2usize..6,
        k2 in 2usize..6,
        with_intercept in prop::bool::ANY,
        with_inter in prop::bool::ANY,
    ) {
        let schema = two_var_schema(k1, k2);
        let mut terms = Vec::new();
        let mut expect = 0usize;
        if with_intercept {
            terms.push(Term::Intercept);
            expect += 1;
        }
        terms.push(Term::Main(VarId(0)));
        expect += k1 - 1;
        terms.push(Term::Main(VarId(1)));
        expect += k2 - 1;
        if with_inter {
            terms.push(Term::Interaction(VarId(0), VarId(1)));
            expect += (k1 - 1) * (k2 - 1);
        }
        let p = LinearPredictorSpec::with_terms(terms);
        prop_assert_eq!(p.coeff_count(&schema), expect);
    }

    #[test]
    fn scenario_structure_and_normalization(
        joint in prop::collection::vec(0.05f64..1.0, 4),
        coefs in prop::collection::vec(-1.5f64..1.5, 9),
        n in 50usize..400,
        seed in 0u64..1000,
    ) {
        let total: f64 = joint.iter().sum();
        let truth = ScenarioTruth {
            survey_joint: [joint[0] / total, joint[1] / total, joint[2] / total, joint[3] / total],
            unit: BinSel { intercept: coefs[0], x1: coefs[1], x2: coefs[2] },
            r1: BinSel { intercept: coefs[3], x1: coefs[4], x2: coefs[5] },
            r2: BinSel { intercept: coefs[6], x1: coefs[7], x2: coefs[8] },
        };
        let table = enumerate_joint(&truth);
        prop_assert!((table.probs.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        let d = generate_scenario(&truth, n, seed);
        for r in d.records() {
            match r.unit() {
                Some(true) => prop_assert!(r.values().iter().all(|&v| v == MISSING)),
                Some(false) => {
                    // indicator = 1 exactly when the value is absent, so no
                    // record can carry a value its indicator calls missing.
                    for k in 0..2 {
                        let ind = r.item_indicator(VarId(k));
                        prop_assert_eq!(
                            ind == mdam_core::data::Indicator::Known(true),
                            r.values()[k] == MISSING
                        );
                    }
                }
                None => unreachable!("generator emits real records only"),
            }
        }
    }
}
