use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conversation::{Conversation, Provenance, Turn};
use super::oracle::{scan_clauses, IdentifiedError, LocatedClause};
use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::world::vocab::{self, A, COLOR, EOS, HOW, IS, MANY, NO, QMARK, THE, THERE, WHAT, YES};
use crate::world::{count_token, CorruptionKind, ObjectId, SceneObject, NUM_OBJECTS};

pub const DEFAULT_TURNS: usize = 5;
pub const DEFAULT_YES_BAND: (f64, f64) = (0.4, 0.6);

/// How many corrective turns each error produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstructionStyle {
    /// One probing turn per error.
    #[default]
    Caption,
    /// A doubled yes/no pair per error: affirm the correct fact, deny the wrong one.
    Ocrvqa,
}

fn exists_turn(object: ObjectId, present: bool) -> Turn {
    Turn::new(
        vec![IS, THERE, A, object.token(), QMARK],
        vec![if present { YES } else { NO }, EOS],
    )
}

fn color_turn(fact: &SceneObject) -> Turn {
    Turn::new(
        vec![WHAT, COLOR, IS, THE, fact.object.token(), QMARK],
        vec![fact.color.token(), EOS],
    )
}

fn count_turn(fact: &SceneObject) -> Turn {
    Turn::new(
        vec![HOW, MANY, fact.object.token(), QMARK],
        vec![count_token(fact.count), EOS],
    )
}

fn is_color_turn(object: ObjectId, color: TokenId, yes: bool) -> Turn {
    Turn::new(
        vec![IS, THE, object.token(), color, QMARK],
        vec![if yes { YES } else { NO }, EOS],
    )
}

fn is_count_turn(object: ObjectId, count: TokenId, yes: bool) -> Turn {
    Turn::new(
        vec![IS, THERE, count, object.token(), QMARK],
        vec![if yes { YES } else { NO }, EOS],
    )
}

fn clause_at(clauses: &[LocatedClause], token_pos: usize) -> Option<&LocatedClause> {
    clauses
        .iter()
        .find(|c| (c.pos..c.pos + crate::world::CLAUSE_LEN).contains(&token_pos))
}

fn first_absent(gt: &[LocatedClause], also_skip: ObjectId) -> Option<ObjectId> {
    (0..NUM_OBJECTS as u8)
        .map(ObjectId)
        .find(|o| *o != also_skip && !gt.iter().any(|c| c.fact.object == *o))
}

/// Corrective turns for one error, or none when the category has no
/// template in the synthetic grammar.
fn corrective_turns(
    err: &IdentifiedError,
    rejected: &[TokenId],
    rej: &[LocatedClause],
    gt: &[LocatedClause],
    style: ConstructionStyle,
) -> Vec<Turn> {
    let Some(kind) = CorruptionKind::from_codebook_category(&err.category) else {
        return Vec::new();
    };
    let gt_fact = |o: ObjectId| gt.iter().find(|c| c.fact.object == o).map(|c| c.fact);
    let doubled = style == ConstructionStyle::Ocrvqa;
    match kind {
        CorruptionKind::FabricatedInsertion | CorruptionKind::ObjectSwap => {
            let Some(r) = clause_at(rej, err.span.0) else {
                return Vec::new();
            };
            let wrong = r.fact.object;
            let mut turns = Vec::new();
            if doubled {
                let correct = match kind {
                    CorruptionKind::ObjectSwap => {
                        err.evidence.and_then(|(s, _)| clause_at(gt, s)).map(|c| c.fact.object)
                    }
                    _ => gt.first().map(|c| c.fact.object),
                };
                if let Some(c) = correct {
                    turns.push(exists_turn(c, true));
                }
            }
            turns.push(exists_turn(wrong, false));
            turns
        }
        CorruptionKind::ObjectOmission => {
            let Some(g) = err.evidence.and_then(|(s, _)| clause_at(gt, s)) else {
                return Vec::new();
            };
            let mut turns = vec![exists_turn(g.fact.object, true)];
            if doubled {
                if let Some(a) = first_absent(gt, g.fact.object) {
                    turns.push(exists_turn(a, false));
                }
            }
            turns
        }
        CorruptionKind::ColorSwap | CorruptionKind::CountOffByOne => {
            let Some(r) = clause_at(rej, err.span.0) else {
                return Vec::new();
            };
            let Some(truth) = gt_fact(r.fact.object) else {
                return Vec::new();
            };
            let is_color = kind == CorruptionKind::ColorSwap;
            if !doubled {
                return vec![if is_color {
                    color_turn(&truth)
                } else {
                    count_turn(&truth)
                }];
            }
            let wrong = rejected[err.span.0];
            if is_color {
                vec![
                    is_color_turn(truth.object, truth.color.token(), true),
                    is_color_turn(truth.object, wrong, false),
                ]
            } else {
                vec![
                    is_count_turn(truth.object, count_token(truth.count), true),
                    is_count_turn(truth.object, wrong, false),
                ]
            }
        }
    }
}

/// GT-grounded turns in a fixed order: color, count and presence of each
/// object, then absence of unmentioned objects.
fn grounded_turns(gt: &[LocatedClause]) -> Vec<Turn> {
    let mut turns = Vec::new();
    for c in gt {
        turns.push(color_turn(&c.fact));
        turns.push(count_turn(&c.fact));
        turns.push(exists_turn(c.fact.object, true));
    }
    for o in (0..NUM_OBJECTS as u8).map(ObjectId) {
        if !gt.iter().any(|c| c.fact.object == o) {
            turns.push(exists_turn(o, false));
        }
    }
    turns
}

/// Builds the corrective conversation `G(y_r; y_c, Q)`.
///
/// Every error with a template yields its corrective turns first; the
/// conversation is then filled with GT-grounded turns up to `k`. Answers are
/// always read from `chosen`.
pub fn construct_conversation(
    errors: &[IdentifiedError],
    rejected: &[TokenId],
    chosen: &[TokenId],
    k: usize,
    style: ConstructionStyle,
) -> Result<Conversation> {
    if k == 0 {
        return Err(Error::contract("construct_conversation needs k >= 1"));
    }
    let gt = scan_clauses(chosen);
    let rej = scan_clauses(rejected);
    let mut turns: Vec<Turn> = Vec::new();
    for err in errors {
        for t in corrective_turns(err, rejected, &rej, &gt, style) {
            if !turns.iter().any(|u| u.question == t.question) {
                turns.push(t);
            }
        }
    }
    for t in grounded_turns(&gt) {
        if turns.len() >= k {
            break;
        }
        if !turns.iter().any(|u| u.question == t.question) {
            turns.push(t);
        }
    }
    Conversation::new(turns, Provenance::Constructed)
}

/// Doubled question-answer pairs for a misclassified book cover.
pub fn ocrvqa_pairs(wrong_answer: &str, correct_answer: &str) -> Result<[(String, String); 2]> {
    if wrong_answer.trim() == correct_answer.trim() {
        return Err(Error::contract("ocrvqa_pairs needs differing answers"));
    }
    Ok([
        (format!("Is this a {} book?", correct_answer.trim()), "Yes".to_string()),
        (format!("Is this a {} book?", wrong_answer.trim()), "No".to_string()),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum YesNo {
    Yes,
    No,
}

fn yes_no(turn: &Turn) -> Option<YesNo> {
    let body: Vec<TokenId> = turn.answer.iter().copied().filter(|t| *t != EOS).collect();
    match body.as_slice() {
        [t] if *t == YES => Some(YesNo::Yes),
        [t] if *t == NO => Some(YesNo::No),
        _ => None,
    }
}

/// Fraction of yes answers among yes/no turns, if there are any.
pub fn yes_fraction(conversation: &Conversation) -> Option<f64> {
    let (mut yes, mut total) = (0usize, 0usize);
    for t in &conversation.turns {
        match yes_no(t) {
            Some(YesNo::Yes) => {
                yes += 1;
                total += 1;
            }
            Some(YesNo::No) => total += 1,
            None => {}
        }
    }
    (total > 0).then(|| yes as f64 / total as f64)
}

/// Randomly erases "no"-answered turns until the yes fraction lies in
/// `[low, high]` or no "no" turn is left. The last remaining turn of a
/// conversation is never erased.
pub fn balance_yes_no(conversation: &Conversation, low: f64, high: f64, seed: u64) -> Result<Conversation> {
    if !(0.0 <= low && low <= high && high <= 1.0) {
        return Err(Error::contract(format!("invalid yes band [{low}, {high}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = conversation.clone();
    loop {
        let Some(f) = yes_fraction(&out) else { break };
        if (low..=high).contains(&f) || out.turns.len() <= 1 {
            break;
        }
        let nos: Vec<usize> = (0..out.turns.len())
            .filter(|&i| yes_no(&out.turns[i]) == Some(YesNo::No))
            .collect();
        let Some(&i) = nos.choose(&mut rng) else { break };
        out.turns.remove(i);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssemblyMode {
    /// Constructed turns appended after the GT turns in one conversation.
    #[default]
    Append,
    /// GT and constructed kept apart as the two terms of the nSFT loss.
    ConcatSeparate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum NsftSample {
    Appended {
        conversation: Conversation,
    },
    Separate {
        gt: Conversation,
        constructed: Option<Conversation>,
    },
}

pub fn assemble_nsft_sample(
    gt: &Conversation,
    constructed: Option<&Conversation>,
    mode: AssemblyMode,
) -> Result<NsftSample> {
    gt.validate()?;
    let constructed = constructed.filter(|c| !c.is_empty());
    Ok(match mode {
        AssemblyMode::Append => {
            let mut conversation = gt.clone();
            if let Some(c) = constructed {
                conversation.turns.extend(c.turns.iter().cloned());
                conversation.provenance = Provenance::Appended;
            }
            NsftSample::Appended { conversation }
        }
        AssemblyMode::ConcatSeparate => NsftSample::Separate {
            gt: gt.clone(),
            constructed: constructed.cloned(),
        },
    })
}

/// Renders a turn as `question => answer` text, for logs and fixtures.
pub fn render_turn(turn: &Turn) -> String {
    format!(
        "{} => {}",
        vocab::detokenize(&turn.question),
        vocab::detokenize(&turn.answer)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::construct::{ErrorCodebook, ErrorOracle, RuleOracle};
    use crate::world::vocab::tokenize;

    fn ids(s: &str) -> Vec<TokenId> {
        tokenize(s).unwrap()
    }

    fn build(yr: &str, yc: &str, k: usize, style: ConstructionStyle) -> Conversation {
        let (yr, yc) = (ids(yr), ids(yc));
        let errs = RuleOracle.identify_errors(&yr, &yc, &ErrorCodebook::builtin()).unwrap();
        construct_conversation(&errs, &yr, &yc, k, style).unwrap()
    }

    fn rendered(c: &Conversation) -> Vec<String> {
        c.turns.iter().map(render_turn).collect()
    }

    #[test]
    fn no_errors_gives_k_grounded_turns() {
        let c = build(
            "two red cup . <eos>",
            "two red cup . <eos>",
            5,
            ConstructionStyle::Caption,
        );
        assert_eq!(c.len(), 5);
        assert_eq!(
            rendered(&c)[..3],
            [
                "what color is the cup ? => red <eos>",
                "how many cup ? => two <eos>",
                "is there a cup ? => yes <eos>",
            ]
        );
    }

    #[test]
    fn fabricated_dog_is_denied() {
        let c = build(
            "two red cup . one blue dog . <eos>",
            "two red cup . <eos>",
            5,
            ConstructionStyle::Caption,
        );
        assert_eq!(rendered(&c)[0], "is there a dog ? => no <eos>");
    }

    #[test]
    fn color_swap_asserts_true_color() {
        let c = build(
            "two blue cup . <eos>",
            "two red cup . <eos>",
            5,
            ConstructionStyle::Caption,
        );
        assert_eq!(rendered(&c)[0], "what color is the cup ? => red <eos>");
    }

    #[test]
    fn ocrvqa_style_doubles_turns() {
        let c = build(
            "two blue cup . <eos>",
            "two red cup . <eos>",
            1,
            ConstructionStyle::Ocrvqa,
        );
        assert_eq!(
            rendered(&c),
            ["is the cup red ? => yes <eos>", "is the cup blue ? => no <eos>"]
        );
    }

    #[test]
    fn turns_grow_past_k_for_many_errors() {
        let c = build(
            "one blue cup . three green dog . <eos>",
            "two red cup . two red dog . <eos>",
            1,
            ConstructionStyle::Caption,
        );
        assert_eq!(c.len(), 4);
        assert!(construct_conversation(&[], &[], &ids("one red cup . <eos>"), 0, ConstructionStyle::Caption).is_err());
    }

    #[test]
    fn ocrvqa_pairs_reject_identical_answers() {
        assert!(ocrvqa_pairs("travel", "travel").is_err());
    }

    fn yn_conversation(yes: usize, no: usize) -> Conversation {
        let mut turns = vec![exists_turn(ObjectId(0), true); yes];
        turns.extend(vec![exists_turn(ObjectId(1), false); no]);
        Conversation::new(turns, Provenance::Constructed).unwrap()
    }

    #[test]
    fn balancing_only_yes_is_identity() {
        let c = yn_conversation(3, 0);
        assert_eq!(balance_yes_no(&c, 0.4, 0.6, 1).unwrap(), c);
    }

    #[test]
    fn balancing_keeps_grounded_turns() {
        let mut c = yn_conversation(1, 6);
        let keep = color_turn(&SceneObject {
            object: ObjectId(2),
            color: crate::world::ColorId(0),
            count: 1,
        });
        c.turns.insert(3, keep.clone());
        let b = balance_yes_no(&c, 0.4, 0.6, 9).unwrap();
        assert!(b.turns.contains(&keep));
        let f = yes_fraction(&b).unwrap();
        assert!((0.4..=0.6).contains(&f));
        assert!(balance_yes_no(&c, 0.7, 0.6, 9).is_err());
    }

    #[test]
    fn append_and_separate_assembly() {
        let gt = yn_conversation(1, 0);
        let extra = yn_conversation(0, 2);
        match assemble_nsft_sample(&gt, None, AssemblyMode::Append).unwrap() {
            NsftSample::Appended { conversation } => assert_eq!(conversation, gt),
            other => panic!("{other:?}"),
        }
        match assemble_nsft_sample(&gt, Some(&extra), AssemblyMode::Append).unwrap() {
            NsftSample::Appended { conversation } => {
                assert_eq!(conversation.len(), 3);
                assert_eq!(conversation.provenance, Provenance::Appended);
            }
            other => panic!("{other:?}"),
        }
    }
}
