//! Rendered realization directives compared against checked-in snapshots.
//! Set `UPDATE_GOLDEN=1` to rewrite the snapshots.

use std::path::PathBuf;

use osc_core::ckm::CkmState;
use osc_core::engine::backend::realize_stub;
use osc_core::engine::directive::{build_directive, DirectiveContext, RealizationDirective};
use osc_core::gap::GapVector;
use osc_core::policy::{CommAction, Objective, Style};
use osc_core::text::{
    AgentId, DialogueHistory, InternalState, PrivatePayload, Query, TaskKind, Utterance,
};

fn directive(simplified: bool) -> RealizationDirective {
    let q = Query::new(
        "what is the sum of all hidden values modulo 10 ?",
        TaskKind::HiddenSum,
    );
    let mut h = DialogueHistory::new();
    h.push(Utterance::new(
        AgentId(0),
        1,
        "[provide_evidence]→agent1 | agent0=3",
        None,
    ))
    .unwrap();
    h.push(Utterance::new(
        AgentId(1),
        1,
        "[request_information]→agent2 | medium detail |",
        None,
    ))
    .unwrap();
    h.push(Utterance::new(
        AgentId(2),
        1,
        "[confirm_agreement]→agent0 | agent2=8",
        None,
    ))
    .unwrap();
    let mut payload = PrivatePayload {
        share: Some(7),
        ..Default::default()
    };
    payload.known.insert(AgentId(0), 3);
    let phi = InternalState::derive(AgentId(1), payload, &q);
    let mut model = CkmState::new(AgentId(1), AgentId(2), vec![0.0; 128]).unwrap();
    model.last_update_round = 1;
    let g: Vec<f64> = (0..64)
        .map(|i| ((i * 37 % 64) as f64 - 31.5) / 32.0)
        .collect();
    let gap = GapVector {
        observer: AgentId(1),
        target: AgentId(2),
        magnitude: 4.625,
        g,
    };
    let team = [AgentId(0), AgentId(1), AgentId(2)];
    let ctx = DirectiveContext {
        query: &q,
        team: &team,
        history: &h,
        history_window: 5,
        open_requests: vec![AgentId(0)],
        simplified,
    };
    let action = CommAction {
        objective: Objective::RequestInformation,
        target: AgentId(2),
        target_index: 1,
        style: Style {
            detail: 0.8,
            assertiveness: 0.2,
        },
        log_prob: 0.0,
        entropy: 0.0,
    };
    build_directive(&action, &phi, &model, &gap, &ctx)
}

fn snapshot(d: &RealizationDirective) -> String {
    let (system, user) = d.render();
    let payload = PrivatePayload {
        share: Some(7),
        ..Default::default()
    };
    let (stub, act) = realize_stub(d, &payload);
    format!("=== system\n{system}\n=== user\n{user}\n=== stub ({act:?})\n{stub}\n")
}

fn check(name: &str, got: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, got).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(got, want, "snapshot {name} differs");
}

#[test]
fn full_directive_matches_snapshot() {
    check("directive_full.txt", &snapshot(&directive(false)));
}

#[test]
fn simplified_directive_matches_snapshot() {
    check("directive_simplified.txt", &snapshot(&directive(true)));
}
