//! CHAIR hallucination metrics and judge-score aggregation.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::world::vocab::{self, EOS, PERIOD};
use crate::world::{ObjectId, Scene};

/// Objects mentioned per sentence of one caption, and the objects actually
/// present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionEval<O: Ord = ObjectId> {
    pub sentences: Vec<BTreeSet<O>>,
    pub ground_truth: BTreeSet<O>,
}

impl CaptionEval<ObjectId> {
    /// Splits a synthetic caption at `.` (stopping at `<eos>`) and collects
    /// object tokens by exact match.
    pub fn from_tokens(tokens: &[TokenId], scene: &Scene) -> Self {
        let body = tokens.split(|t| *t == EOS).next().unwrap_or(&[]);
        let sentences = body
            .split(|t| *t == PERIOD)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.iter()
                    .filter(|t| vocab::is_object(**t))
                    .map(|t| ObjectId((*t - vocab::OBJECT_BASE) as u8))
                    .collect()
            })
            .collect();
        Self {
            sentences,
            ground_truth: scene.objects.iter().map(|o| o.object).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairScores {
    /// Hallucinated mentions over all mentions; absent with no mentions.
    pub chair_i: Option<f64>,
    /// Sentences with a hallucination over all sentences; absent with no sentences.
    pub chair_s: Option<f64>,
    pub chair_avg: Option<f64>,
}

pub fn chair<O: Ord>(evals: &[CaptionEval<O>]) -> ChairScores {
    let (mut mentions, mut bad_mentions, mut sentences, mut bad_sentences) = (0usize, 0usize, 0usize, 0usize);
    for e in evals {
        for s in &e.sentences {
            let bad = s.iter().filter(|o| !e.ground_truth.contains(o)).count();
            mentions += s.len();
            bad_mentions += bad;
            sentences += 1;
            bad_sentences += usize::from(bad > 0);
        }
    }
    let chair_i = (mentions > 0).then(|| bad_mentions as f64 / mentions as f64);
    let chair_s = (sentences > 0).then(|| bad_sentences as f64 / sentences as f64);
    let chair_avg = match (chair_i, chair_s) {
        (Some(i), Some(s)) => Some((i + s) / 2.0),
        _ => None,
    };
    ChairScores {
        chair_i,
        chair_s,
        chair_avg,
    }
}

/// Judge scores for one item, both on a 0-10 scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreItem {
    #[serde(default)]
    pub id: Option<String>,
    pub if_score: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreSheet {
    pub items: Vec<ScoreItem>,
}

impl ScoreSheet {
    pub fn validate(&self) -> Result<()> {
        for (i, it) in self.items.iter().enumerate() {
            for (name, v) in [("if_score", it.if_score), ("accuracy", it.accuracy)] {
                if !(0.0..=10.0).contains(&v) {
                    return Err(Error::contract(format!("item {i}: {name} {v} outside [0, 10]")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreAggregates {
    pub mean_if: f64,
    pub mean_acc: f64,
    /// Mean of the ten best accuracy scores; absent below ten items.
    pub acc_b10: Option<f64>,
    pub acc_w10: Option<f64>,
}

pub fn aggregate_scores(sheet: &ScoreSheet) -> Result<ScoreAggregates> {
    sheet.validate()?;
    let n = sheet.items.len();
    if n == 0 {
        return Err(Error::contract("cannot aggregate an empty score sheet"));
    }
    let mean = |f: fn(&ScoreItem) -> f64| sheet.items.iter().map(f).sum::<f64>() / n as f64;
    let (acc_b10, acc_w10) = if n >= 10 {
        // stable sort keeps item order among ties
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| sheet.items[b].accuracy.total_cmp(&sheet.items[a].accuracy));
        let best = idx[..10].iter().map(|&i| sheet.items[i].accuracy).sum::<f64>() / 10.0;
        idx.sort_by(|&a, &b| sheet.items[a].accuracy.total_cmp(&sheet.items[b].accuracy));
        let worst = idx[..10].iter().map(|&i| sheet.items[i].accuracy).sum::<f64>() / 10.0;
        (Some(best), Some(worst))
    } else {
        (None, None)
    };
    Ok(ScoreAggregates {
        mean_if: mean(|i| i.if_score),
        mean_acc: mean(|i| i.accuracy),
        acc_b10,
        acc_w10,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn write_chair_csv(path: &Path, scores: &ChairScores) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["chair_i", "chair_s", "chair_avg"])?;
    w.write_record([
        fmt_opt(scores.chair_i),
        fmt_opt(scores.chair_s),
        fmt_opt(scores.chair_avg),
    ])?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_aggregates_csv(path: &Path, agg: &ScoreAggregates) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["mean_if", "mean_acc", "acc_b10", "acc_w10"])?;
    w.write_record([
        agg.mean_if.to_string(),
        agg.mean_acc.to_string(),
        fmt_opt(agg.acc_b10),
        fmt_opt(agg.acc_w10),
    ])?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(sentences: &[&[&'static str]], gt: &[&'static str]) -> CaptionEval<&'static str> {
        CaptionEval {
            sentences: sentences.iter().map(|s| s.iter().copied().collect()).collect(),
            ground_truth: gt.iter().copied().collect(),
        }
    }

    #[test]
    fn clean_captions_score_zero() {
        let s = chair(&[eval(&[&["dog"], &["cat"]], &["dog", "cat"])]);
        assert_eq!((s.chair_i, s.chair_s, s.chair_avg), (Some(0.0), Some(0.0), Some(0.0)));
    }

    #[test]
    fn sentence_without_mentions_has_no_chair_i() {
        let s = chair(&[eval(&[&[]], &["dog"])]);
        assert_eq!(s.chair_i, None);
        assert_eq!(s.chair_s, Some(0.0));
        assert_eq!(s.chair_avg, None);
        assert_eq!(chair::<&str>(&[]).chair_s, None);
    }

    #[test]
    fn token_captions_split_on_periods() {
        let scene = crate::world::generate_scene(3);
        let mut caption = crate::world::render_caption(&scene);
        let e = CaptionEval::from_tokens(&caption, &scene);
        assert_eq!(e.sentences.len(), scene.objects.len());
        assert_eq!(chair(&[e]).chair_i, Some(0.0));
        // anything after <eos> is ignored
        caption.extend(vocab::tokenize("one red frog .").unwrap());
        assert_eq!(
            CaptionEval::from_tokens(&caption, &scene).sentences.len(),
            scene.objects.len()
        );
    }

    #[test]
    fn fewer_than_ten_items_have_no_extremes() {
        let sheet = ScoreSheet {
            items: (0..9)
                .map(|i| ScoreItem {
                    id: None,
                    if_score: 5.0,
                    accuracy: i as f64,
                })
                .collect(),
        };
        let a = aggregate_scores(&sheet).unwrap();
        assert_eq!(a.acc_b10, None);
        assert_eq!(a.mean_acc, 4.0);
        assert!(aggregate_scores(&ScoreSheet::default()).is_err());
    }

    #[test]
    fn out_of_range_scores_are_rejected() {
        let sheet = ScoreSheet {
            items: vec![ScoreItem {
                id: None,
                if_score: 11.0,
                accuracy: 1.0,
            }],
        };
        assert!(aggregate_scores(&sheet).is_err());
    }
}
