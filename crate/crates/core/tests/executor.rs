use evassist_core::executor::{
    execute, ground_plan, parse_trace, recover, run_response_phase, validate_plan, write_trace, CalibrationTransform, ExecError,
    ExecFault, ExecutionFaultConfig, ExecutionGeometry, PhaseConfig, PhaseOutcome,
};
use evassist_core::monitor::{build_payload, MonitorConfig, Snapshot, TriggerMode};
use evassist_core::perception::{perceive, ObjectMap, PerceptionNoiseConfig};
use evassist_core::planner::{Action, OraclePlanner, PlannerContract, PlannerRequest, PlannerResponse, WaitReason};
use evassist_core::workspace::{apply_mutation, parse_expression, parse_scene_fixture, Mutation, Point, Pose, QualitativeRelation, Scene, Zone};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const PRE: &str = "\
1 2 200 300 0 expression_row
2 + 250 300 0 expression_row
3 3 120 550 0 candidate_tray
4 = 190 550 0 candidate_tray
5 5 100 470 0 candidate_tray
6 7 160 470 0 candidate_tray
";
const POST: &str = "\
1 2 200 300 0 expression_row
2 + 250 300 0 expression_row
3 3 300 300 0 expression_row
4 = 350 300 0 expression_row
5 5 100 470 0 candidate_tray
6 7 160 470 0 candidate_tray
";

fn observe(scene: &Scene, frame: u64) -> Snapshot {
    let mut s = scene.clone();
    s.frame_index = frame;
    s.timestamp = frame as f64 / 30.0;
    Snapshot::capture(&s, 0.0, &MonitorConfig::default())
}

fn map_of(scene: &Scene) -> ObjectMap {
    perceive(&observe(scene, 0), &PerceptionNoiseConfig::default())
}

fn id_at(map: &ObjectMap, x: f64, y: f64) -> u32 {
    *map.entries.iter().find(|(_, e)| e.anchor == Point::new(x, y)).expect("entry at point").0
}

fn request(pre: &Scene, post: &Scene) -> (PlannerRequest, ObjectMap) {
    let payload = build_payload(TriggerMode::Proposed, Some(observe(pre, 10)), Some(observe(post, 60)), None, None).unwrap();
    let map = map_of(post);
    (PlannerRequest::new(payload, &map, PlannerContract::default()), map)
}

#[test]
fn oracle_turn_completes_the_expression() {
    let (pre, post) = (parse_scene_fixture(PRE).unwrap(), parse_scene_fixture(POST).unwrap());
    let (req, map) = request(&pre, &post);
    let result = run_response_phase(&req, &mut OraclePlanner, &map, &post, &PhaseConfig::default(), 1);
    assert_eq!(result.outcome, PhaseOutcome::Completed);
    assert_eq!(result.planner_calls, 1);
    assert_eq!(result.retries, 0);
    assert!(result.verdicts.last().unwrap().pass);
    let parse = parse_expression(&result.scene).unwrap();
    assert_eq!(parse.written_result, Some(5));
    let five = &result.scene.blocks[&5];
    assert_eq!((five.pose.x, five.pose.y), (395.0, 300.0));
}

#[test]
fn unsolvable_turn_waits_without_touching_the_scene() {
    let pre = parse_scene_fixture(&PRE.replace("5 5 100 470", "5 9 100 470")).unwrap();
    let post = parse_scene_fixture(&POST.replace("5 5 100 470", "5 9 100 470")).unwrap();
    let (req, map) = request(&pre, &post);
    let result = run_response_phase(&req, &mut OraclePlanner, &map, &post, &PhaseConfig::default(), 1);
    assert_eq!(result.outcome, PhaseOutcome::Waited { reason: WaitReason::NoSolution });
    assert!(result.trace.is_empty());
    assert_eq!(result.scene, post);
}

#[test]
fn place_misses_are_retried_with_corrective_plans() {
    let (pre, post) = (parse_scene_fixture(PRE).unwrap(), parse_scene_fixture(POST).unwrap());
    let (req, map) = request(&pre, &post);
    let mut config = PhaseConfig::default();
    config.execution_faults.p_place_miss = 1.0;
    let result = run_response_phase(&req, &mut OraclePlanner, &map, &post, &config, 1);
    assert!(matches!(result.outcome, PhaseOutcome::ExecutionFailed { .. }));
    assert_eq!(result.retries, config.retry_limit);
    assert_eq!(result.verdicts.len() as u32, config.retry_limit + 1);
    assert!(result.verdicts.iter().all(|v| !v.pass));
    assert!(result.recovery_executed);
    assert_eq!(result.scene.held().count(), 0);
    assert!(result.trace.iter().any(|r| r.injected_fault == Some(ExecFault::PlaceMiss)));

    config.execution_faults.p_place_miss = 0.5;
    let recovered = (0..40u64)
        .map(|seed| run_response_phase(&req, &mut OraclePlanner, &map, &post, &config, seed))
        .find(|r| r.retries > 0 && r.outcome == PhaseOutcome::Completed);
    assert!(recovered.is_some(), "no seed recovered after a miss");
}

#[test]
fn validation_rejects_bad_plans_before_execution() {
    let post = parse_scene_fixture(POST).unwrap();
    let map = map_of(&post);
    let geometry = ExecutionGeometry::default();
    let eq = id_at(&map, 350.0, 300.0);
    let five = id_at(&map, 100.0, 470.0);
    let two = id_at(&map, 200.0, 300.0);
    let plan = |actions: Vec<Action>| PlannerResponse { actions, rationale: String::new(), goal_note: None };

    assert_eq!(validate_plan(&plan(vec![]), &map, &geometry), Err(ExecError::EmptyPlan));
    assert_eq!(validate_plan(&plan(vec![Action::Pick { target_id: 99 }]), &map, &geometry), Err(ExecError::MissingId(99)));
    assert!(matches!(
        validate_plan(&plan(vec![Action::Pick { target_id: five }]), &map, &geometry),
        Err(ExecError::InfeasibleAction { .. })
    ));
    // right of `2` is occupied by `+`
    let onto = plan(vec![
        Action::Pick { target_id: five },
        Action::Place { reference_id: two, relation: QualitativeRelation::RightOf, offset_scale: 1.0 },
    ]);
    assert!(matches!(validate_plan(&onto, &map, &geometry), Err(ExecError::InfeasibleAction { index: 1, .. })));
    let off_table = plan(vec![
        Action::Pick { target_id: five },
        Action::Place { reference_id: eq, relation: QualitativeRelation::RightOf, offset_scale: 20.0 },
    ]);
    assert!(matches!(validate_plan(&off_table, &map, &geometry), Err(ExecError::InfeasibleAction { .. })));
    let ok = plan(vec![
        Action::Pick { target_id: five },
        Action::Place { reference_id: eq, relation: QualitativeRelation::RightOf, offset_scale: 1.0 },
    ]);
    assert_eq!(validate_plan(&ok, &map, &geometry).unwrap().actions, ok.actions);
}

#[test]
fn rotated_calibration_executes_to_the_same_scene() {
    let post = parse_scene_fixture(POST).unwrap();
    let map = map_of(&post);
    let geometry = ExecutionGeometry::default();
    let response = PlannerResponse {
        actions: vec![
            Action::Pick { target_id: id_at(&map, 100.0, 470.0) },
            Action::Place { reference_id: id_at(&map, 350.0, 300.0), relation: QualitativeRelation::RightOf, offset_scale: 1.0 },
        ],
        rationale: String::new(),
        goal_note: None,
    };
    let plan = validate_plan(&response, &map, &geometry).unwrap();
    let faults = ExecutionFaultConfig::default();
    let mut outcomes = Vec::new();
    for cal in [CalibrationTransform::default(), CalibrationTransform::new(1.1, Point::new(300.0, -80.0), 0.8).unwrap()] {
        let grounded = ground_plan(&plan, &map, &cal, &geometry).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (scene, trace) = execute(&grounded, &post, &faults, &cal, &geometry.tolerance, &mut rng).unwrap();
        assert_eq!(parse_trace(&write_trace(&trace)).unwrap(), trace);
        let five = &scene.blocks[&5];
        outcomes.push(((five.pose.x * 1e6).round(), (five.pose.y * 1e6).round(), five.zone));
    }
    assert_eq!(outcomes[0], outcomes[1]);
    assert_eq!(outcomes[0], (395.0e6, 300.0e6, Zone::ExpressionRow));
}

#[test]
fn recovery_parks_held_blocks_on_free_cells() {
    let post = parse_scene_fixture(POST).unwrap();
    let lifted = apply_mutation(&post, &Mutation::lift(5, Pose::new(500.0, 200.0, 0.0))).unwrap();
    let lifted = apply_mutation(&lifted, &Mutation::lift(6, Pose::new(520.0, 200.0, 0.0))).unwrap();
    let parked = recover(&lifted);
    assert_eq!(parked.held().count(), 0);
    parked.validate().unwrap();
    for id in [5, 6] {
        let b = &parked.blocks[&id];
        assert!(b.zone.is_on_table());
        assert!(!parked.in_band(b.anchor()));
    }
}

#[test]
fn fault_config_is_validated() {
    let bad = ExecutionFaultConfig { p_place_miss: 1.2, ..Default::default() };
    assert!(bad.validate().is_err());
    assert!(CalibrationTransform::new(0.0, Point::new(0.0, 0.0), 0.0).is_err());
}
