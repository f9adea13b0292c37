//! Byte-exact prompt renderings for the six-turn trading example.

use clarify_core::corpus::{Dialogue, GoldRelation, RelationType};
use clarify_core::protocol::{render_dcm_prompt, render_dp_prompt, render_teacher_prompt, ParseOutput, TeacherRequest};

fn dialogue() -> Dialogue {
    Dialogue::new(
        "fig2",
        [
            ("ztime", "random 7"),
            ("shawnus", "damn"),
            ("ztime", "doesn't happen like this in the real game does it...?"),
            ("somdechn", "wood for clay?"),
            ("shawnus", "two resources stolen!"),
            ("ztime", "sorry..."),
        ],
    )
    .unwrap()
}

#[test]
fn parser_prompt() {
    assert_eq!(
        render_dp_prompt(dialogue().turns()),
        include_str!("golden/fig2_parser_prompt.txt")
    );
}

#[test]
fn clarifier_prompt() {
    assert_eq!(
        render_dcm_prompt(dialogue().turns()),
        include_str!("golden/fig2_clarifier_prompt.txt")
    );
}

#[test]
fn teacher_prompt() {
    let d = dialogue();
    let req = TeacherRequest::new(
        d.turns(),
        GoldRelation::new(6, 5, RelationType::Comment).unwrap(),
        ParseOutput::link(6, 4, RelationType::QuestionAnswerPair).unwrap(),
    )
    .unwrap();
    assert_eq!(render_teacher_prompt(&req), include_str!("golden/fig2_teacher_prompt.txt"));
}
