//! Seeded planner error injection mirroring the failure categories seen
//! with learned planners.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::oracle::{oracle_infer_goal, oracle_plan, GoalInference};
use super::{Action, OverlayEntry, Planner, PlannerError, PlannerOutput, PlannerRequest, PlannerResponse, TaskContext, WaitReason};
use crate::rng;
use crate::workspace::{QualitativeRelation, Symbol};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerFaultConfig {
    pub p_ambiguous_wait: f64,
    pub p_wrong_result: f64,
    pub p_unintended_pick: f64,
    pub p_wrong_relation: f64,
    pub seed: u64,
}

impl PlannerFaultConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("p_ambiguous_wait", self.p_ambiguous_wait),
            ("p_wrong_result", self.p_wrong_result),
            ("p_unintended_pick", self.p_unintended_pick),
            ("p_wrong_relation", self.p_wrong_relation),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerFaultKind {
    AmbiguousWait,
    WrongResult,
    UnintendedPick,
    WrongRelation,
}

/// What `perturb` may look at when rewriting a plan.
pub struct PerturbContext<'a> {
    pub overlay: &'a [OverlayEntry],
    pub task: &'a TaskContext,
    pub inference: Option<&'a GoalInference>,
}

impl PerturbContext<'_> {
    fn equals_id(&self) -> Option<u32> {
        self.inference.and_then(|i| i.equals_id).or_else(|| {
            self.overlay
                .iter()
                .filter(|e| e.symbol == Symbol::Equals && self.task.in_band(e.anchor))
                .map(|e| e.id)
                .max()
        })
    }

    fn band(&self) -> impl Iterator<Item = &OverlayEntry> {
        self.overlay.iter().filter(|e| self.task.in_band(e.anchor))
    }

    fn tray(&self) -> impl Iterator<Item = &OverlayEntry> {
        self.overlay.iter().filter(|e| !self.task.in_band(e.anchor))
    }

    fn symbol_of(&self, id: u32) -> Option<Symbol> {
        self.overlay.iter().find(|e| e.id == id).map(|e| e.symbol)
    }
}

fn wrong_result(response: &PlannerResponse, ctx: &PerturbContext<'_>, rng: &mut ChaCha8Rng) -> Option<PlannerResponse> {
    let picks = response.picked_ids();
    if let Some(&first) = picks.first() {
        let correct = ctx.symbol_of(first)?;
        let candidates: Vec<u32> = ctx
            .tray()
            .filter(|e| e.symbol != correct && !picks.contains(&e.id))
            .map(|e| e.id)
            .collect();
        let replacement = *candidates.choose(rng)?;
        let actions = response
            .actions
            .iter()
            .map(|a| match *a {
                Action::Pick { target_id } if target_id == first => Action::Pick { target_id: replacement },
                Action::Place { reference_id, relation, offset_scale } if reference_id == first => {
                    Action::Place { reference_id: replacement, relation, offset_scale }
                }
                other => other,
            })
            .collect();
        return Some(PlannerResponse { actions, rationale: response.rationale.clone(), goal_note: response.goal_note.clone() });
    }
    // a wait becomes a forced completion attempt
    let equals = ctx.equals_id()?;
    let candidates: Vec<u32> = ctx.tray().map(|e| e.id).collect();
    let target = *candidates.choose(rng)?;
    Some(PlannerResponse {
        actions: vec![
            Action::Pick { target_id: target },
            Action::Place { reference_id: equals, relation: QualitativeRelation::RightOf, offset_scale: 1.0 },
        ],
        rationale: "completing the expression".into(),
        goal_note: None,
    })
}

fn unintended_pick(ctx: &PerturbContext<'_>, rng: &mut ChaCha8Rng) -> Option<PlannerResponse> {
    let equals = ctx.equals_id();
    let movable: Vec<u32> = ctx.band().filter(|e| Some(e.id) != equals).map(|e| e.id).collect();
    let target = *movable.choose(rng)?;
    let reference = equals.or_else(|| ctx.band().map(|e| e.id).find(|&id| id != target))?;
    Some(PlannerResponse {
        actions: vec![
            Action::Pick { target_id: target },
            Action::Place { reference_id: reference, relation: QualitativeRelation::Below, offset_scale: 2.0 },
        ],
        rationale: "tidying the recently placed blocks".into(),
        goal_note: None,
    })
}

fn wrong_relation(response: &PlannerResponse, rng: &mut ChaCha8Rng) -> Option<PlannerResponse> {
    let idx = response.actions.iter().position(|a| matches!(a, Action::Place { .. }))?;
    let mut actions = response.actions.clone();
    if let Action::Place { reference_id, offset_scale, .. } = actions[idx] {
        let relation = *[QualitativeRelation::Above, QualitativeRelation::Below].choose(rng)?;
        actions[idx] = Action::Place { reference_id, relation, offset_scale };
    }
    Some(PlannerResponse { actions, rationale: response.rationale.clone(), goal_note: response.goal_note.clone() })
}

/// Applies at most one configured fault to `response`.
pub fn perturb(
    response: &PlannerResponse,
    config: &PlannerFaultConfig,
    ctx: &PerturbContext<'_>,
    rng: &mut ChaCha8Rng,
) -> (PlannerResponse, Option<PlannerFaultKind>) {
    let draws: [f64; 4] = [rng.random(), rng.random(), rng.random(), rng.random()];
    let acting = !response.is_wait();
    if draws[0] < config.p_ambiguous_wait && response.wait_reason() != Some(WaitReason::InsufficientEvidence) {
        return (
            PlannerResponse::wait(WaitReason::InsufficientEvidence, "not confident about the intended goal"),
            Some(PlannerFaultKind::AmbiguousWait),
        );
    }
    if draws[1] < config.p_wrong_result {
        if let Some(r) = wrong_result(response, ctx, rng) {
            return (r, Some(PlannerFaultKind::WrongResult));
        }
    }
    if draws[2] < config.p_unintended_pick {
        if let Some(r) = unintended_pick(ctx, rng) {
            return (r, Some(PlannerFaultKind::UnintendedPick));
        }
    }
    if acting && draws[3] < config.p_wrong_relation {
        if let Some(r) = wrong_relation(response, rng) {
            return (r, Some(PlannerFaultKind::WrongRelation));
        }
    }
    (response.clone(), None)
}

/// Oracle planner followed by [`perturb`].
#[derive(Debug, Clone)]
pub struct NoisyPlanner {
    config: PlannerFaultConfig,
    rng: ChaCha8Rng,
}

impl NoisyPlanner {
    pub fn new(config: PlannerFaultConfig) -> Self {
        let rng = rng::stream(config.seed, "planner-faults");
        NoisyPlanner { config, rng }
    }
}

impl Planner for NoisyPlanner {
    fn name(&self) -> &str {
        "noisy"
    }

    fn plan(&mut self, request: &PlannerRequest) -> Result<PlannerOutput, PlannerError> {
        let inference = oracle_infer_goal(request)?;
        let clean = oracle_plan(&inference, &request.overlay, &request.task)?;
        let ctx = PerturbContext {
            overlay: &request.overlay,
            task: &request.task,
            inference: Some(&inference),
        };
        let (response, injected_fault) = perturb(&clean, &self.config, &ctx, &mut self.rng);
        Ok(PlannerOutput { response, injected_fault })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workspace::{Point, Rect};

    fn entry(id: u32, c: char, x: f64, y: f64) -> OverlayEntry {
        OverlayEntry { id, symbol: Symbol::from_char(c).unwrap(), anchor: Point::new(x, y), bbox: Rect::centered(Point::new(x, y), 40.0, 40.0) }
    }

    fn overlay() -> Vec<OverlayEntry> {
        vec![
            entry(0, '2', 200.0, 300.0),
            entry(1, '+', 250.0, 300.0),
            entry(2, '3', 300.0, 300.0),
            entry(3, '=', 350.0, 300.0),
            entry(4, '5', 200.0, 450.0),
            entry(5, '7', 260.0, 450.0),
        ]
    }

    fn act_plan() -> PlannerResponse {
        PlannerResponse {
            actions: vec![
                Action::Pick { target_id: 4 },
                Action::Place { reference_id: 3, relation: QualitativeRelation::RightOf, offset_scale: 1.0 },
            ],
            rationale: "2+3=5".into(),
            goal_note: None,
        }
    }

    fn run(cfg: PlannerFaultConfig, response: &PlannerResponse) -> (PlannerResponse, Option<PlannerFaultKind>) {
        let ov = overlay();
        let task = TaskContext::default();
        let ctx = PerturbContext { overlay: &ov, task: &task, inference: None };
        perturb(response, &cfg, &ctx, &mut rng::stream(1, "t"))
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let plan = act_plan();
        assert_eq!(run(PlannerFaultConfig::default(), &plan), (plan, None));
    }

    #[test]
    fn forced_ambiguity() {
        let (r, k) = run(PlannerFaultConfig { p_ambiguous_wait: 1.0, ..Default::default() }, &act_plan());
        assert_eq!(r.actions, vec![Action::Wait { reason: WaitReason::InsufficientEvidence }]);
        assert_eq!(k, Some(PlannerFaultKind::AmbiguousWait));
    }

    #[test]
    fn forced_wrong_result_targets_other_candidate() {
        let (r, k) = run(PlannerFaultConfig { p_wrong_result: 1.0, ..Default::default() }, &act_plan());
        assert_eq!(r.picked_ids(), vec![5]);
        assert_eq!(k, Some(PlannerFaultKind::WrongResult));
        let (w, _) = run(
            PlannerFaultConfig { p_wrong_result: 1.0, ..Default::default() },
            &PlannerResponse::wait(WaitReason::NoSolution, ""),
        );
        assert_eq!(w.actions.len(), 2);
    }

    #[test]
    fn forced_unintended_pick_takes_a_row_block() {
        let (r, k) = run(PlannerFaultConfig { p_unintended_pick: 1.0, ..Default::default() }, &act_plan());
        assert!(r.picked_ids().iter().all(|id| [0, 1, 2].contains(id)));
        assert_eq!(k, Some(PlannerFaultKind::UnintendedPick));
    }

    #[test]
    fn forced_wrong_relation() {
        let (r, k) = run(PlannerFaultConfig { p_wrong_relation: 1.0, ..Default::default() }, &act_plan());
        assert!(matches!(r.actions[1], Action::Place { relation, .. } if relation != QualitativeRelation::RightOf));
        assert_eq!(k, Some(PlannerFaultKind::WrongRelation));
    }
}
