//! Weekly survey scoring.
//!
//! * Sleep disturbance: 4 items on 1–5; items 1 and 2 are positively
//!   worded and reverse-coded so higher totals mean worse sleep (4–20).
//! * Stress: 4 items on 1–5; items 2 and 3 are positively worded and
//!   reverse-coded (4–20).
//! * Loneliness: 3 items on 1–3, summed (3–9).
//!
//! A missing or out-of-range item makes that instrument missing for the week.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SLEEP_REVERSED: [usize; 2] = [0, 1];
pub const STRESS_REVERSED: [usize; 2] = [1, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Sleep,
    Stress,
    Loneliness,
}

impl Outcome {
    pub const ALL: [Outcome; 3] = [Outcome::Sleep, Outcome::Stress, Outcome::Loneliness];

    pub fn name(self) -> &'static str {
        match self {
            Outcome::Sleep => "sleep",
            Outcome::Stress => "stress",
            Outcome::Loneliness => "loneliness",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == name)
    }

    /// Inclusive score range of the instrument total.
    pub fn range(self) -> (f64, f64) {
        match self {
            Outcome::Sleep | Outcome::Stress => (4.0, 20.0),
            Outcome::Loneliness => (3.0, 9.0),
        }
    }

    pub fn item_count(self) -> usize {
        match self {
            Outcome::Loneliness => 3,
            _ => 4,
        }
    }

    pub fn item_max(self) -> u8 {
        match self {
            Outcome::Loneliness => 3,
            _ => 5,
        }
    }

    pub fn reversed_items(self) -> &'static [usize] {
        match self {
            Outcome::Sleep => &SLEEP_REVERSED,
            Outcome::Stress => &STRESS_REVERSED,
            Outcome::Loneliness => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSurvey {
    pub user_id: String,
    pub survey_ts_ms: i64,
    pub sleep: [Option<u8>; 4],
    pub stress: [Option<u8>; 4],
    pub loneliness: [Option<u8>; 3],
}

impl RawSurvey {
    pub fn items(&self, outcome: Outcome) -> &[Option<u8>] {
        match outcome {
            Outcome::Sleep => &self.sleep,
            Outcome::Stress => &self.stress,
            Outcome::Loneliness => &self.loneliness,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Outcomes {
    pub sleep: Option<f64>,
    pub stress: Option<f64>,
    pub loneliness: Option<f64>,
}

impl Outcomes {
    pub fn get(&self, o: Outcome) -> Option<f64> {
        match o {
            Outcome::Sleep => self.sleep,
            Outcome::Stress => self.stress,
            Outcome::Loneliness => self.loneliness,
        }
    }
}

fn score_instrument(items: &[Option<u8>], outcome: Outcome) -> Option<f64> {
    let max = outcome.item_max();
    let mut total = 0u32;
    for (i, item) in items.iter().enumerate() {
        let raw = (*item)?;
        if raw < 1 || raw > max {
            return None;
        }
        let coded = if outcome.reversed_items().contains(&i) {
            max + 1 - raw
        } else {
            raw
        };
        total += u32::from(coded);
    }
    Some(f64::from(total))
}

pub fn score_surveys(raw: &RawSurvey) -> Outcomes {
    Outcomes {
        sleep: score_instrument(&raw.sleep, Outcome::Sleep),
        stress: score_instrument(&raw.stress, Outcome::Stress),
        loneliness: score_instrument(&raw.loneliness, Outcome::Loneliness),
    }
}

/// Raw items whose scored total equals `total` (coded values as even as
/// possible, earlier items taking the remainder).
pub fn backfill_items(outcome: Outcome, total: u32) -> Vec<u8> {
    let n = outcome.item_count() as u32;
    let max = u32::from(outcome.item_max());
    let total = total.clamp(n, n * max);
    let base = total / n;
    let extra = total % n;
    (0..n as usize)
        .map(|i| {
            let coded = (base + u32::from((i as u32) < extra)) as u8;
            if outcome.reversed_items().contains(&i) {
                outcome.item_max() + 1 - coded
            } else {
                coded
            }
        })
        .collect()
}

pub const SURVEY_COLUMNS: [&str; 13] = [
    "user_id",
    "survey_ts_ms",
    "sleep_1",
    "sleep_2",
    "sleep_3",
    "sleep_4",
    "pss_1",
    "pss_2",
    "pss_3",
    "pss_4",
    "ucla_1",
    "ucla_2",
    "ucla_3",
];

pub fn write_surveys_csv<W: Write>(out: W, surveys: &[RawSurvey]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SURVEY_COLUMNS)?;
    let cell = |v: &Option<u8>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in surveys {
        let mut row = vec![s.user_id.clone(), s.survey_ts_ms.to_string()];
        row.extend(s.sleep.iter().map(cell));
        row.extend(s.stress.iter().map(cell));
        row.extend(s.loneliness.iter().map(cell));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_surveys_csv<R: Read>(input: R) -> Result<Vec<RawSurvey>> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader.headers()?.clone();
    let mut idx = [0usize; 13];
    for (slot, name) in idx.iter_mut().zip(SURVEY_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("survey file missing column `{name}`")))?;
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let item = |k: usize| row.get(idx[k]).and_then(|s| s.trim().parse::<u8>().ok());
        let survey_ts_ms = row
            .get(idx[1])
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::InvalidInput("survey file: bad timestamp".into()))?;
        out.push(RawSurvey {
            user_id: row[idx[0]].to_string(),
            survey_ts_ms,
            sleep: [item(2), item(3), item(4), item(5)],
            stress: [item(6), item(7), item(8), item(9)],
            loneliness: [item(10), item(11), item(12)],
        });
    }
    Ok(out)
}
