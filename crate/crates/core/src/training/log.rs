use std::fmt;
use std::str::FromStr;

use super::TrainError;

/// Which run a validation record came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Train,
    Finetune,
    Stage1,
    Stage2,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Finetune => "finetune",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Stage {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "train" => Stage::Train,
            "finetune" => Stage::Finetune,
            "stage1" => Stage::Stage1,
            "stage2" => Stage::Stage2,
            other => return Err(TrainError::Format(format!("unknown stage `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRecord {
    pub stage: Stage,
    pub step: usize,
    /// Mean training batch loss since the previous record; `None` for the
    /// step-0 record of a zero-step run.
    pub train_loss: Option<f64>,
    pub dev_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<ValidationRecord>,
    /// Record whose parameters were kept.
    pub selected: Option<(Stage, usize)>,
}

const TSV_HEADER: &str = "stage\tstep\ttrain_loss\tdev_loss";

impl TrainLog {
    pub fn records_for(&self, stage: Stage) -> impl Iterator<Item = &ValidationRecord> + '_ {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    pub fn selected_step(&self) -> Option<usize> {
        self.selected.map(|(_, s)| s)
    }

    /// Earliest record with the minimum dev loss within `stage`.
    pub fn best(&self, stage: Stage) -> Option<&ValidationRecord> {
        self.records_for(stage)
            .fold(None, |best: Option<&ValidationRecord>, r| match best {
                Some(b) if b.dev_loss <= r.dev_loss => Some(b),
                _ => Some(r),
            })
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.records.extend(other.records);
        self.selected = other.selected;
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{TSV_HEADER}\n");
        for r in &self.records {
            let train = r.train_loss.map_or("-".to_string(), |v| format!("{v:?}"));
            out.push_str(&format!("{}\t{}\t{}\t{:?}\n", r.stage, r.step, train, r.dev_loss));
        }
        if let Some((stage, step)) = self.selected {
            out.push_str(&format!("#selected\t{stage}\t{step}\n"));
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self, TrainError> {
        let bad = |line: &str| TrainError::Format(format!("bad train log line `{line}`"));
        let mut lines = text.lines();
        if lines.next() != Some(TSV_HEADER) {
            return Err(TrainError::Format("missing train log header".into()));
        }
        let mut log = TrainLog::default();
        for line in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.first() == Some(&"#selected") {
                let [_, stage, step] = f[..] else { return Err(bad(line)) };
                log.selected = Some((stage.parse()?, step.parse().map_err(|_| bad(line))?));
                continue;
            }
            let [stage, step, train, dev] = f[..] else {
                return Err(bad(line));
            };
            log.records.push(ValidationRecord {
                stage: stage.parse()?,
                step: step.parse().map_err(|_| bad(line))?,
                train_loss: match train {
                    "-" => None,
                    v => Some(v.parse().map_err(|_| bad(line))?),
                },
                dev_loss: dev.parse().map_err(|_| bad(line))?,
            });
        }
        Ok(log)
    }
}
