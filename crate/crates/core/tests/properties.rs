use evassist_core::monitor::{replay_trace, ActivitySample, MonitorConfig, Transition};
use evassist_core::planner::{parse_reply, write_reply, Action, PlannerContract, PlannerResponse, WaitReason};
use evassist_core::workspace::{
    evaluate, parse_row, parse_scene_fixture, relation_between, write_scene_fixture, ArithmeticError, Operator, Point,
    QualitativeRelation, RelationTolerance, RowToken, Symbol,
};
use proptest::prelude::*;

fn relation() -> impl Strategy<Value = QualitativeRelation> {
    prop::sample::select(QualitativeRelation::ALL.to_vec())
}

fn operator() -> impl Strategy<Value = Operator> {
    prop::sample::select(vec![Operator::Add, Operator::Sub, Operator::Mul, Operator::Div])
}

fn point() -> impl Strategy<Value = Point> {
    (-500.0..500.0f64, -500.0..500.0f64).prop_map(|(x, y)| Point::new(x, y))
}

proptest! {
    #[test]
    fn relations_are_symmetric_under_inverse(a in point(), b in point(), r in relation()) {
        let tol = RelationTolerance::for_footprint(40.0);
        prop_assert_eq!(relation_between(a, b, r, tol), relation_between(b, a, r.inverse(), tol));
    }

    #[test]
    fn opposite_relations_never_both_hold(a in point(), b in point(), r in relation()) {
        let tol = RelationTolerance::for_footprint(40.0);
        prop_assert!(!(relation_between(a, b, r, tol) && relation_between(a, b, r.inverse(), tol)));
    }

    #[test]
    fn evaluation_matches_brute_force(a in -99i64..=99, b in -99i64..=99, op in operator()) {
        let expected: Result<i64, ArithmeticError> = match op {
            Operator::Add => Ok(a + b),
            Operator::Sub => Ok(a - b),
            Operator::Mul => Ok(a * b),
            Operator::Div if b == 0 => Err(ArithmeticError::DivisionByZero),
            Operator::Div => (-99i64..=99).find(|q| q * b == a).ok_or(ArithmeticError::NonIntegerResult),
        };
        prop_assert_eq!(evaluate(a, op, b), expected);
    }

    #[test]
    fn row_parse_ignores_scan_order(
        lhs in 0u8..10, rhs in 0u8..10, op in operator(), with_eq in any::<bool>(),
        x0 in 60.0..400.0f64, order in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let mut symbols = vec![Symbol::Digit(lhs), Symbol::Op(op), Symbol::Digit(rhs)];
        if with_eq {
            symbols.push(Symbol::Equals);
        }
        let tokens: Vec<RowToken> = symbols
            .iter()
            .enumerate()
            .map(|(i, &symbol)| RowToken { symbol, id: i as u32 + 1, anchor: Point::new(x0 + 50.0 * i as f64, 300.0) })
            .collect();
        let shuffled: Vec<RowToken> = order.iter().filter(|&&i| i < tokens.len()).map(|&i| tokens[i]).collect();
        let a = parse_row(tokens.clone(), 60.0).unwrap();
        let b = parse_row(shuffled, 60.0).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.complete, with_eq);
        if with_eq {
            prop_assert_eq!(a.value, evaluate(i64::from(lhs), op, i64::from(rhs)).ok());
        }
    }

    #[test]
    fn state_machine_matches_run_length_counter(levels in prop::collection::vec(prop::sample::select(vec![0.0, 1.0, 3.0, 5.0, 9.0]), 1..300)) {
        let cfg = MonitorConfig::default();
        let samples: Vec<ActivitySample> =
            levels.iter().enumerate().map(|(i, &rho)| ActivitySample { frame_index: i as u64, rho }).collect();
        // run-length formulation: count qualifying samples, reset on any miss
        let mut expected = Vec::new();
        let (mut active, mut run) = (false, 0u32);
        for (i, &rho) in levels.iter().enumerate() {
            let qualifies = if active { rho < cfg.theta_off } else { rho > cfg.theta_on };
            run = if qualifies { run + 1 } else { 0 };
            if run == if active { cfg.n_off } else { cfg.n_on } {
                expected.push(if active { Transition::Offset { frame: i as u64 } } else { Transition::Onset { frame: i as u64 } });
                active = !active;
                run = 0;
            }
        }
        prop_assert_eq!(replay_trace(&samples, &cfg).unwrap(), expected);
    }

    #[test]
    fn transitions_alternate(levels in prop::collection::vec(0.0..20.0f64, 1..400)) {
        let samples: Vec<ActivitySample> =
            levels.iter().enumerate().map(|(i, &rho)| ActivitySample { frame_index: i as u64, rho }).collect();
        let t = replay_trace(&samples, &MonitorConfig::default()).unwrap();
        for (k, tr) in t.iter().enumerate() {
            prop_assert_eq!(matches!(tr, Transition::Onset { .. }), k % 2 == 0);
        }
    }

    #[test]
    fn scene_fixture_round_trips(xs in prop::collection::btree_set(0u32..18, 1..10), digit in 0u8..10) {
        let text: String = xs
            .iter()
            .enumerate()
            .map(|(i, &slot)| format!("{} {} {} 470 0 candidate_tray\n", i + 1, Symbol::Digit((digit + i as u8) % 10).as_char(), 40 + 50 * slot))
            .collect();
        let scene = parse_scene_fixture(&text).unwrap();
        prop_assert_eq!(parse_scene_fixture(&write_scene_fixture(&scene)).unwrap(), scene);
    }

    #[test]
    fn valid_replies_round_trip(
        steps in prop::collection::vec((0u32..50, 0u32..50, relation(), 1u32..8), 0..4),
        wait in prop::option::of(prop::sample::select(vec![WaitReason::NoSolution, WaitReason::InsufficientEvidence])),
        rationale in "[a-z0-9 +=]{0,30}",
    ) {
        let actions = match wait {
            Some(reason) => vec![Action::Wait { reason }],
            None => steps
                .iter()
                .flat_map(|&(t, r, relation, k)| {
                    [Action::Pick { target_id: t }, Action::Place { reference_id: r, relation, offset_scale: f64::from(k) * 0.5 }]
                })
                .collect(),
        };
        let reply = PlannerResponse { actions, rationale, goal_note: None };
        prop_assert_eq!(parse_reply(&write_reply(&reply), &PlannerContract::default()).unwrap(), reply);
    }
}
