//! Rendered prompts against reference texts.
//!
//! Each file under `tests/golden/` holds the reference system and user text
//! with the first fixture case substituted into the placeholders. Rendering
//! must reproduce it token for token (whitespace-separated tokens).

mod support;

use cpvaudit::cpv::build_cpv;
use cpvaudit::demographics::Gender;
use cpvaudit::prompting::{extra, render, solution_text, PromptTemplate, TemplateKind};

const GOLDEN: [(TemplateKind, &str); 7] = [
    (TemplateKind::Exploratory, include_str!("golden/exploratory.txt")),
    (TemplateKind::Q, include_str!("golden/q.txt")),
    (TemplateKind::QIF, include_str!("golden/qif.txt")),
    (TemplateKind::QIFCoT, include_str!("golden/qif_cot.txt")),
    (TemplateKind::FTMCQ, include_str!("golden/ft_mcq.txt")),
    (TemplateKind::FTXPL, include_str!("golden/ft_xpl.txt")),
    (TemplateKind::NoOptions, include_str!("golden/no_options.txt")),
];

fn tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn check(kind: TemplateKind, golden: &str) {
    let case = &support::fixture_cases()[0];
    let variant = build_cpv(std::slice::from_ref(case), &[Gender::Male], &[None])
        .variants
        .into_iter()
        .find(|v| v.is_original)
        .unwrap();
    let extras = match kind {
        TemplateKind::FTXPL => extra(&[("SOLUTION", &solution_text(case))]),
        _ => Default::default(),
    };
    let prompt = render(PromptTemplate::builtin(kind), &variant, &extras).unwrap();
    let (system, user) = golden
        .strip_prefix("=== system ===\n")
        .and_then(|g| g.split_once("=== user ===\n"))
        .expect("golden layout");
    assert_eq!(tokens(&prompt.system), tokens(system), "{kind:?} system");
    assert_eq!(tokens(&prompt.user), tokens(user), "{kind:?} user");
}

#[test]
fn every_golden_prompt_matches() {
    for (kind, golden) in GOLDEN {
        check(kind, golden);
    }
}

#[test]
fn golden_files_differ_from_each_other() {
    // Guards against a template silently aliasing another kind.
    for (i, (_, a)) in GOLDEN.iter().enumerate() {
        for (_, b) in &GOLDEN[i + 1..] {
            assert_ne!(tokens(a), tokens(b));
        }
    }
}
