use serde::{Deserialize, Serialize};

use super::codebook::ErrorCodebook;
use crate::error::Result;
use crate::model::TokenId;
use crate::world::vocab::{self, PERIOD};
use crate::world::{count_token, ColorId, CorruptionKind, ObjectId, SceneObject, CLAUSE_LEN};

/// One error found in a rejected response.
///
/// `span` is a half-open token range in the rejected response; omissions use
/// an empty span at the point where the missing content belongs. `evidence`
/// points at the supporting range of the ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentifiedError {
    pub category: String,
    pub span: (usize, usize),
    pub correction: String,
    pub evidence: Option<(usize, usize)>,
}

impl IdentifiedError {
    pub fn validate(&self, rejected_len: usize, chosen_len: usize, codebook: &ErrorCodebook) -> Result<()> {
        use crate::error::Error;
        if !codebook.contains(&self.category) {
            return Err(Error::contract(format!("category `{}` not in codebook", self.category)));
        }
        let (s, e) = self.span;
        if s > e || e > rejected_len {
            return Err(Error::contract(format!(
                "span {s}..{e} outside response of length {rejected_len}"
            )));
        }
        if let Some((s, e)) = self.evidence {
            if s > e || e > chosen_len {
                return Err(Error::contract(format!(
                    "evidence {s}..{e} outside ground truth of length {chosen_len}"
                )));
            }
        }
        Ok(())
    }
}

/// Finds errors in a rejected response given the ground truth.
pub trait ErrorOracle {
    fn identify_errors(
        &self,
        rejected: &[TokenId],
        chosen: &[TokenId],
        codebook: &ErrorCodebook,
    ) -> Result<Vec<IdentifiedError>>;
}

/// A `count color object .` clause found at token offset `pos`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocatedClause {
    pub pos: usize,
    pub fact: SceneObject,
}

/// Scans a token sequence for well-formed clauses, skipping anything else.
/// Total on arbitrary input, so it also reads model outputs.
pub fn scan_clauses(tokens: &[TokenId]) -> Vec<LocatedClause> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + CLAUSE_LEN <= tokens.len() {
        let c = &tokens[i..i + CLAUSE_LEN];
        if vocab::is_count(c[0]) && vocab::is_color(c[1]) && vocab::is_object(c[2]) && c[3] == PERIOD {
            out.push(LocatedClause {
                pos: i,
                fact: SceneObject {
                    count: (c[0] - vocab::COUNT_BASE + 1) as u8,
                    color: ColorId((c[1] - vocab::COLOR_BASE) as u8),
                    object: ObjectId((c[2] - vocab::OBJECT_BASE) as u8),
                },
            });
            i += CLAUSE_LEN;
        } else {
            i += 1;
        }
    }
    out
}

fn clause_text(fact: &SceneObject) -> String {
    vocab::detokenize(&fact.clause())
}

/// Deterministic oracle for synthetic captions: compares the clauses of the
/// response with those of the ground truth.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleOracle;

impl ErrorOracle for RuleOracle {
    fn identify_errors(
        &self,
        rejected: &[TokenId],
        chosen: &[TokenId],
        codebook: &ErrorCodebook,
    ) -> Result<Vec<IdentifiedError>> {
        Ok(rule_errors(rejected, chosen)
            .into_iter()
            .filter(|e| codebook.contains(&e.category))
            .collect())
    }
}

fn category(kind: CorruptionKind) -> String {
    kind.codebook_category().to_string()
}

fn rule_errors(rejected: &[TokenId], chosen: &[TokenId]) -> Vec<IdentifiedError> {
    let gt = scan_clauses(chosen);
    let rej = scan_clauses(rejected);
    let gt_of = |o: ObjectId| gt.iter().find(|c| c.fact.object == o);
    let mut errors = Vec::new();

    let mut extras = Vec::new();
    for r in &rej {
        match gt_of(r.fact.object) {
            Some(g) => {
                if r.fact.count != g.fact.count {
                    errors.push(IdentifiedError {
                        category: category(CorruptionKind::CountOffByOne),
                        span: (r.pos, r.pos + 1),
                        correction: vocab::word(count_token(g.fact.count)).unwrap_or_default().to_string(),
                        evidence: Some((g.pos, g.pos + 1)),
                    });
                }
                if r.fact.color != g.fact.color {
                    errors.push(IdentifiedError {
                        category: category(CorruptionKind::ColorSwap),
                        span: (r.pos + 1, r.pos + 2),
                        correction: vocab::COLORS[g.fact.color.0 as usize].to_string(),
                        evidence: Some((g.pos + 1, g.pos + 2)),
                    });
                }
            }
            None => extras.push(*r),
        }
    }
    let missing: Vec<LocatedClause> = gt
        .iter()
        .filter(|g| !rej.iter().any(|r| r.fact.object == g.fact.object))
        .copied()
        .collect();

    // an unknown object standing in for a missing one is a misidentification
    let paired = extras.len().min(missing.len());
    for (r, g) in extras.iter().zip(&missing).take(paired) {
        errors.push(IdentifiedError {
            category: category(CorruptionKind::ObjectSwap),
            span: (r.pos + 2, r.pos + 3),
            correction: g.fact.object.name().to_string(),
            evidence: Some((g.pos + 2, g.pos + 3)),
        });
    }
    for r in &extras[paired..] {
        errors.push(IdentifiedError {
            category: category(CorruptionKind::FabricatedInsertion),
            span: (r.pos, r.pos + CLAUSE_LEN),
            correction: format!("there is no {}", r.fact.object.name()),
            evidence: None,
        });
    }
    for g in &missing[paired..] {
        let at = rej
            .iter()
            .find(|r| r.fact.object > g.fact.object)
            .map(|r| r.pos)
            .or_else(|| rej.last().map(|r| r.pos + CLAUSE_LEN))
            .unwrap_or(0);
        errors.push(IdentifiedError {
            category: category(CorruptionKind::ObjectOmission),
            span: (at, at),
            correction: clause_text(&g.fact),
            evidence: Some((g.pos, g.pos + CLAUSE_LEN)),
        });
    }
    errors.sort_by(|a, b| a.span.cmp(&b.span).then_with(|| a.category.cmp(&b.category)));
    errors
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::vocab::tokenize;

    fn ids(s: &str) -> Vec<TokenId> {
        tokenize(s).unwrap()
    }

    #[test]
    fn identical_responses_have_no_errors() {
        let y = ids("two red cup . one blue dog . <eos>");
        let cb = ErrorCodebook::builtin();
        assert!(RuleOracle.identify_errors(&y, &y, &cb).unwrap().is_empty());
    }

    #[test]
    fn color_swap_span_covers_color_token() {
        let yc = ids("two red cup . <eos>");
        let yr = ids("two blue cup . <eos>");
        let e = RuleOracle.identify_errors(&yr, &yc, &ErrorCodebook::builtin()).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].category, "attribute/color");
        assert_eq!(e[0].span, (1, 2));
        assert_eq!(e[0].correction, "red");
    }

    #[test]
    fn omission_has_empty_span_and_evidence() {
        let yc = ids("two red cup . one blue dog . <eos>");
        let yr = ids("one blue dog . <eos>");
        let e = RuleOracle.identify_errors(&yr, &yc, &ErrorCodebook::builtin()).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].category, "existence/omission");
        assert_eq!(e[0].span, (0, 0));
        assert_eq!(e[0].evidence, Some((0, 4)));
    }

    #[test]
    fn scanner_skips_garbage() {
        let t = ids("red red two red cup . cup <eos> one blue dog .");
        let c = scan_clauses(&t);
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].pos, 2);
        assert_eq!(c[1].pos, 8);
    }

    #[test]
    fn categories_outside_codebook_are_dropped() {
        let cb = ErrorCodebook::from_json(
            r#"{"version":"t","categories":[{"name":"attribute/color","description":"","level":"instance"}]}"#,
        )
        .unwrap();
        let yc = ids("two red cup . <eos>");
        let yr = ids("three blue cup . <eos>");
        let e = RuleOracle.identify_errors(&yr, &yc, &cb).unwrap();
        assert_eq!(e.len(), 1);
    }
}
