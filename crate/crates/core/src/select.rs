//! Backward stepwise AIC selection under marginality, per-site choice of the
//! level grouping, and composite formulas.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::lenient_f64;
use crate::car1::{CorrelationSpec, GroupRule};
use crate::data::Dataset;
use crate::design::{build_design_with, DesignOptions, ModelFormula, QuantileRule, Term};
use crate::error::{Error, Result};
use crate::gls::{fit, FittedModel, Method};
use crate::validate::{cross_validate, CvStats};

/// Terms not contained in any other remaining term, in formula order.
pub fn droppable_terms(formula: &ModelFormula) -> Vec<Term> {
    formula
        .terms()
        .iter()
        .filter(|t| !formula.terms().iter().any(|other| other.strictly_contains(t)))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateDrop {
    pub term: String,
    #[serde(with = "lenient_f64")]
    pub aic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub formula: ModelFormula,
    #[serde(with = "lenient_f64")]
    pub aic: f64,
    /// Term whose removal produced this formula; `None` for the start.
    pub dropped: Option<String>,
    /// Every single-term drop evaluated from this formula.
    pub candidates: Vec<CandidateDrop>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub steps: Vec<SelectionStep>,
    pub winner: ModelFormula,
    pub correlation: CorrelationSpec,
    pub method: Method,
    /// Rows shared by every candidate fit.
    pub rows: usize,
}

impl SelectionTrace {
    pub fn winner_aic(&self) -> f64 {
        self.steps.last().map(|s| s.aic).unwrap_or(f64::NAN)
    }
}

/// Fits `formula` by ML on the rows of `dataset` complete for `full`.
fn ml_fit(dataset: &Dataset, formula: &ModelFormula, corr: &CorrelationSpec) -> Result<FittedModel> {
    let opts = DesignOptions {
        extra_required: corr.required_variables(),
        layout: None,
    };
    fit(&build_design_with(dataset, formula, &opts)?, corr, Method::Ml)
}

/// Repeatedly removes the droppable term whose removal lowers AIC the most
/// until no removal lowers it. Equal AICs go to the term latest in formula
/// order. All fits use ML on the rows complete for the full formula.
pub fn backward_stepwise(dataset: &Dataset, full: &ModelFormula, corr: &CorrelationSpec) -> Result<SelectionTrace> {
    let opts = DesignOptions {
        extra_required: corr.required_variables(),
        layout: None,
    };
    let full_design = build_design_with(dataset, full, &opts)?;
    let sources: Vec<usize> = full_design.rows.iter().map(|r| r.source).collect();
    let common = dataset.subset(&sources);

    let mut current = full.clone();
    let mut current_aic = fit(&full_design, corr, Method::Ml)?.aic;
    let mut steps = vec![SelectionStep {
        formula: current.clone(),
        aic: current_aic,
        dropped: None,
        candidates: Vec::new(),
    }];

    loop {
        let droppable = droppable_terms(&current);
        let results: Vec<Result<(Term, f64)>> = droppable
            .par_iter()
            .map(|term| {
                let reduced = current.without(term)?;
                Ok((term.clone(), ml_fit(&common, &reduced, corr)?.aic))
            })
            .collect();
        let evaluated = results.into_iter().collect::<Result<Vec<_>>>()?;
        steps.last_mut().unwrap().candidates = evaluated
            .iter()
            .map(|(t, aic)| CandidateDrop {
                term: t.label(),
                aic: *aic,
            })
            .collect();

        let mut best: Option<&(Term, f64)> = None;
        for cand in &evaluated {
            if best.is_none_or(|b| cand.1 <= b.1) {
                best = Some(cand);
            }
        }
        match best {
            Some((term, aic)) if *aic < current_aic => {
                current = current.without(term)?;
                current_aic = *aic;
                steps.push(SelectionStep {
                    formula: current.clone(),
                    aic: *aic,
                    dropped: Some(term.label()),
                    candidates: Vec::new(),
                });
            }
            _ => break,
        }
    }

    Ok(SelectionTrace {
        steps,
        winner: current,
        correlation: corr.clone(),
        method: Method::Ml,
        rows: full_design.n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleRun {
    pub rule: QuantileRule,
    pub trace: SelectionTrace,
    pub cv: CvStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSelection {
    pub site: String,
    pub best_formula: ModelFormula,
    pub best_grouping: CorrelationSpec,
    pub runs: Vec<RuleRun>,
}

/// Stepwise selection at one site under each level-grouping rule, then the
/// REML-refitted winner with the lowest cvRMSE. Ties keep the earlier rule.
pub fn select_per_site(
    dataset: &Dataset,
    full: &ModelFormula,
    site: &str,
    rules: &[QuantileRule],
    level_var: &str,
    blocks: usize,
) -> Result<SiteSelection> {
    let site_data = dataset.filter_site(site);
    if site_data.is_empty() {
        return Err(Error::Input(format!("site {site:?} not in dataset")));
    }
    if rules.is_empty() {
        return Err(Error::Input("no grouping rules given".into()));
    }
    let mut runs = Vec::with_capacity(rules.len());
    for &rule in rules {
        let corr = CorrelationSpec::new(GroupRule::Level {
            var: level_var.to_owned(),
            rule,
        });
        let trace = backward_stepwise(&site_data, full, &corr)?;
        let cv = cross_validate(&site_data, &trace.winner, &corr, blocks)?;
        runs.push(RuleRun { rule, trace, cv });
    }
    let best = runs
        .iter()
        .enumerate()
        .fold(0, |b, (i, r)| if r.cv.cv_rmse < runs[b].cv.cv_rmse { i } else { b });
    Ok(SiteSelection {
        site: site.to_owned(),
        best_formula: runs[best].trace.winner.clone(),
        best_grouping: runs[best].trace.correlation.clone(),
        runs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteWinner {
    pub site: String,
    pub formula: ModelFormula,
    pub grouping: CorrelationSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeSpec {
    pub winners: Vec<SiteWinner>,
    pub union: ModelFormula,
}

/// Union of the winners' terms closed under marginality. Terms are ordered
/// by their position in `reference` when given, otherwise by interaction
/// order and first appearance.
pub fn compose(winners: &[SiteWinner], reference: Option<&ModelFormula>) -> Result<CompositeSpec> {
    let first = winners
        .first()
        .ok_or_else(|| Error::Input("compose needs at least one winner".into()))?;
    let response = first.formula.response().clone();
    if let Some(w) = winners.iter().find(|w| *w.formula.response() != response) {
        return Err(Error::Formula(format!("site {} has a different response", w.site)));
    }
    let mut terms: Vec<Term> = Vec::new();
    for w in winners {
        for t in w.formula.terms() {
            for m in t.marginal_terms().into_iter().chain(std::iter::once(t.clone())) {
                if !terms.iter().any(|u| u.same_as(&m)) {
                    terms.push(m);
                }
            }
        }
    }
    let ref_pos = |t: &Term| {
        reference
            .and_then(|r| r.terms().iter().position(|u| u.same_as(t)))
            .unwrap_or(usize::MAX)
    };
    let mut keyed: Vec<(usize, usize, usize, Term)> = terms
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let pos = ref_pos(&t);
            // keep the reference's factor order for shared terms
            let t = reference.map_or(t.clone(), |r| r.terms().get(pos).cloned().unwrap_or(t));
            (pos, t.order(), i, t)
        })
        .collect();
    keyed.sort_by_key(|k| (k.0, k.1, k.2));
    let union = ModelFormula::new(response, keyed.into_iter().map(|k| k.3).collect())?;
    Ok(CompositeSpec {
        winners: winners.to_vec(),
        union,
    })
}
