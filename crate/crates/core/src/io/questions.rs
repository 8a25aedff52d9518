use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use super::{parse_json, read_text, to_json, write_bytes};
use crate::compose::CompositionTriplet;
use crate::error::{Error, Result};
use crate::model::{OrderingQuestion, Permutation5, Task, CANDIDATES_PER_QUESTION};

#[derive(Serialize, Deserialize)]
struct QuestionsDoc {
    task: Task,
    questions: Vec<QuestionDoc>,
}

#[derive(Serialize, Deserialize)]
struct QuestionDoc {
    qid: String,
    video_id: String,
    items: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    captions: Option<Vec<String>>,
    candidates: Vec<Vec<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer: Option<i64>,
}

pub fn questions_from_str(text: &str) -> Result<(Task, Vec<OrderingQuestion>)> {
    let doc: QuestionsDoc = parse_json(text, "questions")?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(doc.questions.len());
    for q in doc.questions {
        if !seen.insert(q.qid.clone()) {
            return Err(Error::DuplicateQuestion(q.qid));
        }
        if q.candidates.len() != CANDIDATES_PER_QUESTION {
            return Err(Error::InvalidArgument(format!(
                "question {}: expected 4 candidates, got {}",
                q.qid,
                q.candidates.len()
            )));
        }
        let mut candidates = [Permutation5::IDENTITY; CANDIDATES_PER_QUESTION];
        for (slot, c) in candidates.iter_mut().zip(&q.candidates) {
            *slot = Permutation5::from_slice(c)
                .map_err(|e| Error::InvalidArgument(format!("question {}: {e}", q.qid)))?;
        }
        let answer = match q.answer {
            None => None,
            Some(a) if (0..CANDIDATES_PER_QUESTION as i64).contains(&a) => Some(a as u8),
            Some(a) => return Err(Error::ChoiceOutOfRange { qid: q.qid, index: a }),
        };
        let question = OrderingQuestion {
            question_id: q.qid,
            task: doc.task,
            video_id: q.video_id,
            items: q.items,
            captions: q.captions,
            candidates,
            answer,
        };
        question.validate()?;
        out.push(question);
    }
    Ok((doc.task, out))
}

pub fn questions_to_string(task: Task, questions: &[OrderingQuestion]) -> Result<String> {
    let mut docs = Vec::with_capacity(questions.len());
    for q in questions {
        if q.task != task {
            return Err(Error::InvalidArgument(format!(
                "question {} belongs to task {}, file task is {}",
                q.question_id,
                q.task.as_str(),
                task.as_str()
            )));
        }
        docs.push(QuestionDoc {
            qid: q.question_id.clone(),
            video_id: q.video_id.clone(),
            items: q.items.clone(),
            captions: q.captions.clone(),
            candidates: q
                .candidates
                .iter()
                .map(|c| c.order().iter().map(|&v| v as i64).collect())
                .collect(),
            answer: q.answer.map(|a| a as i64),
        });
    }
    Ok(to_json(&QuestionsDoc { task, questions: docs }))
}

pub fn read_questions(path: &Path) -> Result<(Task, Vec<OrderingQuestion>)> {
    questions_from_str(&read_text(path)?)
}

pub fn write_questions(path: &Path, task: Task, questions: &[OrderingQuestion]) -> Result<()> {
    write_bytes(path, questions_to_string(task, questions)?.as_bytes())
}

/// Question id to chosen candidate index. Used both for predictions and for
/// answer keys.
pub type Choices = BTreeMap<String, u8>;

struct RawChoices(Vec<(String, i64)>);

impl<'de> Deserialize<'de> for RawChoices {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = RawChoices;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping question ids to choice indices")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawChoices, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, i64>()? {
                    out.push((k, v));
                }
                Ok(RawChoices(out))
            }
        }
        d.deserialize_map(V)
    }
}

pub fn choices_from_str(text: &str) -> Result<Choices> {
    let raw: RawChoices = parse_json(text, "choices")?;
    let mut out = Choices::new();
    for (qid, idx) in raw.0 {
        if !(0..CANDIDATES_PER_QUESTION as i64).contains(&idx) {
            return Err(Error::ChoiceOutOfRange { qid, index: idx });
        }
        if out.insert(qid.clone(), idx as u8).is_some() {
            return Err(Error::DuplicateQuestion(qid));
        }
    }
    Ok(out)
}

pub fn choices_to_string(choices: &Choices) -> String {
    to_json(choices)
}

pub fn read_choices(path: &Path) -> Result<Choices> {
    choices_from_str(&read_text(path)?)
}

pub fn write_choices(path: &Path, choices: &Choices) -> Result<()> {
    write_bytes(path, choices_to_string(choices).as_bytes())
}

/// Every keyed question must have a prediction, and no prediction may refer
/// to a question outside the key.
pub fn check_predictions(predictions: &Choices, key: &Choices) -> Result<()> {
    if let Some(qid) = key.keys().find(|q| !predictions.contains_key(*q)) {
        return Err(Error::MissingPrediction(qid.clone()));
    }
    if let Some(qid) = predictions.keys().find(|q| !key.contains_key(*q)) {
        return Err(Error::UnknownQuestion(qid.clone()));
    }
    Ok(())
}

/// One decoded localization, as written to localization prediction files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub start_s: f64,
    pub end_s: f64,
    pub score: f64,
}

pub fn localizations_to_string(locs: &BTreeMap<String, Localization>) -> String {
    to_json(locs)
}

#[derive(Serialize, Deserialize)]
struct TripletsDoc {
    triplets: Vec<CompositionTriplet>,
}

pub fn triplets_to_string(triplets: &[CompositionTriplet]) -> String {
    to_json(&TripletsDoc {
        triplets: triplets.to_vec(),
    })
}

pub fn read_triplets(path: &Path) -> Result<Vec<CompositionTriplet>> {
    let doc: TripletsDoc = parse_json(&read_text(path)?, "triplets")?;
    Ok(doc.triplets)
}

pub fn write_triplets(path: &Path, triplets: &[CompositionTriplet]) -> Result<()> {
    write_bytes(path, triplets_to_string(triplets).as_bytes())
}
