//! Augmentation plan selection on the validation split.

use std::io::Write;

use super::experiment::{mean_std, run_seed, ExperimentConfig};
use crate::augment::{full_pool, select_plan, AugmentPlan};
use crate::error::Result;
use crate::pipeline::{train, Predictor, TrainConfig};
use crate::rng;

const SALT_SELECT: u64 = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct PlanScore {
    pub plan: AugmentPlan,
    pub val_acc: f64,
}

/// Scores size-`groups` plans from the full pool by mean validation
/// accuracy over `exp.runs` shot draws; returns the winner and every score
/// in evaluation order.
pub fn select_plan_on_val(
    exp: &ExperimentConfig,
    groups: usize,
) -> Result<(AugmentPlan, Vec<PlanScore>)> {
    exp.validate()?;
    let data = exp.dataset()?;
    let mut scores = Vec::new();
    let best = select_plan(&full_pool(), groups, |plan| {
        let cfg = TrainConfig {
            plan: plan.clone(),
            ..exp.train.clone()
        };
        let mut accs = Vec::with_capacity(exp.runs);
        for r in 0..exp.runs {
            let seed = run_seed(exp.train.seed, r);
            let mut s = rng::stream(rng::derive(seed, SALT_SELECT));
            let shots = data.sample_shots(exp.data.shots, &mut s)?;
            let state = train(
                &TrainConfig {
                    seed,
                    ..cfg.clone()
                },
                exp.data.classes,
                &shots,
                &[],
            )?;
            accs.push(Predictor::new(&state)?.accuracy(&data.val)?);
        }
        let val_acc = mean_std(&accs).0;
        scores.push(PlanScore {
            plan: plan.clone(),
            val_acc,
        });
        Ok(val_acc)
    })?;
    Ok((best, scores))
}

pub const PLAN_CSV_HEADER: &str = "plan,val_acc,selected";

/// Plans are written as `;`-separated operation names.
pub fn write_plan_csv<W: Write>(
    out: &mut W,
    best: &AugmentPlan,
    scores: &[PlanScore],
) -> Result<()> {
    writeln!(out, "{PLAN_CSV_HEADER}")?;
    for s in scores {
        let names: Vec<&str> = s.plan.kinds().iter().map(|k| k.name()).collect();
        writeln!(out, "{},{},{}", names.join(";"), s.val_acc, &s.plan == best)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_scores_every_plan_and_marks_one() {
        let exp = ExperimentConfig {
            runs: 1,
            ..ExperimentConfig::micro()
        };
        let (best, scores) = select_plan_on_val(&exp, 2).unwrap();
        assert_eq!(best.len(), 2);
        assert!(!scores.is_empty());
        assert!(scores.iter().all(|s| (0.0..=1.0).contains(&s.val_acc)));
        let mut buf = Vec::new();
        write_plan_csv(&mut buf, &best, &scores).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), PLAN_CSV_HEADER);
        assert_eq!(text.lines().filter(|l| l.ends_with(",true")).count(), 1);
    }
}
