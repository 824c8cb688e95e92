//! Experiment protocols behind the result tables: cohort selection from
//! tabular records, whole-year truncation at the event of interest,
//! conditional simulation, and paired empirical-versus-model estimates
//! with bootstrap intervals, plus plot-ready figure tables.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::causal::{
    ate_diff_means, child_penalty, counterfactual_income, event_study_ols, local_ate_rdd, paired_bootstrap,
    penalty_delta, propensity_match, AteResult, CausalSample, EventPanel, Group, MatchCandidate, PanelRow,
    PenaltyPath,
};
use crate::encode::{IncomeQuantizer, IntensityLevel, LifeSequence, Vocabulary, YEAR_INDEX_BASE};
use crate::generate::{
    monte_carlo_outcomes, parse_years_lenient, simulation_rng, truncate_at_cutoff, AnchorEvent, CutoffSpec,
    FirstBenefitMonths, GenerationConfig, OutcomeExtractor, Prefix, RetirementAgeMonths, SequenceModel, SimOutcome,
    TransformerModel, TruthReplay, YearlyIncome, MATERNITY_THRESHOLD,
};
use crate::model::{ModelParams, Projections};
use crate::rng::substream;
use crate::synth::{
    age_in_months, province_region, LabourStatus, PersonWithRecords, Region, Sex, TabularRecord, OBSERVATION_END,
};
use crate::{Error, Result};

/// Mobility-allowance age threshold, in months.
pub const BENEFIT_AGE_CUTOFF: f64 = 480.0;

/// Bandwidths (months) for the benefit-duration discontinuity rows.
pub const BENEFIT_BANDWIDTHS: [f64; 4] = [12.0, 48.0, 96.0, 144.0];

/// Event-time windows (years) summarizing the maternity penalty paths.
pub const PENALTY_WINDOWS: [(i32, i32); 3] = [(0, 3), (0, 5), (0, 10)];

/// Pre-event years kept in the maternity panels; the reference period is
/// event time -1.
const PRE_YEARS: i32 = 3;

/// Post-event years kept in the maternity panels, the longest penalty
/// window.
const POST_YEARS: i32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    Pension1y,
    Pension4y,
    Unemployment,
    Maternity,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 4] =
        [ExperimentName::Pension1y, ExperimentName::Pension4y, ExperimentName::Unemployment, ExperimentName::Maternity];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentName::Pension1y => "pension_1y",
            ExperimentName::Pension4y => "pension_4y",
            ExperimentName::Unemployment => "unemployment",
            ExperimentName::Maternity => "maternity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment '{s}' (expected one of pension_1y, pension_4y, unemployment, maternity)")))
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_bootstrap() -> usize {
    1000
}
fn default_min_cohort() -> usize {
    20
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub generation: GenerationConfig,
    /// Resamples (or parametric draws) behind every interval.
    #[serde(default = "default_bootstrap")]
    pub bootstrap_draws: usize,
    /// Smallest admissible analysis cohort.
    #[serde(default = "default_min_cohort")]
    pub min_cohort: usize,
    /// Keep only simulated control trajectories free of maternity. Replay
    /// oracles reproduce the observed maternity, so tests relax this.
    #[serde(default = "default_true")]
    pub no_maternity_controls: bool,
    /// Also produce figure tables; the maternity income-path figure costs
    /// one extra simulation pass.
    #[serde(default = "default_true")]
    pub emit_figures: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            generation: GenerationConfig::default(),
            bootstrap_draws: default_bootstrap(),
            min_cohort: default_min_cohort(),
            no_maternity_controls: true,
            emit_figures: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.generation.validate()?;
        if self.generation.n_simulations == 0 {
            return Err(Error::Config("n_simulations must be positive".into()));
        }
        if self.bootstrap_draws < 2 {
            return Err(Error::Config(format!("{} bootstrap draws cannot form an interval", self.bootstrap_draws)));
        }
        if self.min_cohort < 2 {
            return Err(Error::Config("min_cohort must be at least 2".into()));
        }
        Ok(())
    }
}

/// Supplies the sequence model continuing one person's history.
pub trait PersonModel: Sync {
    fn model_for(&self, full: &LifeSequence) -> Box<dyn SequenceModel + '_>;
}

/// One trained transformer shared across persons.
pub struct TrainedStudyModel<'a> {
    pub params: &'a ModelParams,
    pub proj: &'a Projections,
}

impl PersonModel for TrainedStudyModel<'_> {
    fn model_for(&self, _full: &LifeSequence) -> Box<dyn SequenceModel + '_> {
        Box::new(TransformerModel::new(self.params, self.proj))
    }
}

/// Oracle replaying each person's own observed continuation.
pub struct ReplayStudyModel {
    pub vocab_size: usize,
}

impl PersonModel for ReplayStudyModel {
    fn model_for(&self, full: &LifeSequence) -> Box<dyn SequenceModel + '_> {
        Box::new(TruthReplay::new(full.clone(), self.vocab_size))
    }
}

/// Aligned study inputs: person `i`'s records and encoded sequence share an
/// index and a person id.
#[derive(Clone, Copy)]
pub struct StudyData<'a> {
    pub persons: &'a [PersonWithRecords],
    pub seqs: &'a [LifeSequence],
    pub vocab: &'a Vocabulary,
    pub quantizer: &'a IncomeQuantizer,
}

impl<'a> StudyData<'a> {
    pub fn new(
        persons: &'a [PersonWithRecords],
        seqs: &'a [LifeSequence],
        vocab: &'a Vocabulary,
        quantizer: &'a IncomeQuantizer,
    ) -> Result<Self> {
        if persons.len() != seqs.len() {
            return Err(Error::Data(format!("{} persons but {} sequences", persons.len(), seqs.len())));
        }
        for (p, s) in persons.iter().zip(seqs) {
            if p.profile.person_id != s.person_id {
                return Err(Error::Data(format!(
                    "person {} is aligned with sequence of person {}",
                    p.profile.person_id, s.person_id
                )));
            }
        }
        Ok(StudyData { persons, seqs, vocab, quantizer })
    }
}

/// One line of the result table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AteRow {
    pub label: String,
    pub empirical: AteResult,
    pub model: AteResult,
    pub delta: AteResult,
    pub n: usize,
}

/// Event-study coefficient path for one arm: (event time, normalized
/// effect, standard error) per point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathSeries {
    pub arm: String,
    pub points: Vec<(i32, f64, f64)>,
}

/// Plot-ready table; every row is pre-formatted to the header's columns.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotTable {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl PlotTable {
    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Drop and exclusion counts accumulated by one experiment run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ExperimentDiagnostics {
    pub n_cohort: usize,
    /// Persons whose cutoff fell outside their observed years, or whose
    /// observed outcome could not be measured.
    pub n_dropped: usize,
    /// Persons with no simulation producing a measurable outcome.
    pub n_without_sim_outcome: usize,
    pub n_simulations: usize,
    pub n_censored: usize,
    pub n_invalid: usize,
    pub n_model_errors: usize,
    /// Maternity only.
    pub n_control_pool: usize,
    pub n_matched: usize,
    pub n_pairs_unaligned: usize,
    pub n_sims_with_maternity: usize,
    pub n_mother_years_uncovered: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub name: ExperimentName,
    pub rows: Vec<AteRow>,
    /// Maternity event-study paths; empty for the other experiments.
    pub paths: Vec<PathSeries>,
    pub figures: Vec<PlotTable>,
    pub diagnostics: ExperimentDiagnostics,
}

/// Column layout of the result-table CSV.
pub const ATE_CSV_HEADER: &str =
    "label,ate_emp,ate_emp_lo,ate_emp_hi,ate_model,ate_model_lo,ate_model_hi,delta,delta_lo,delta_hi,n";

pub fn ate_table_csv(rows: &[AteRow]) -> String {
    let mut out = String::from(ATE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.label,
            r.empirical.point,
            r.empirical.lo,
            r.empirical.hi,
            r.model.point,
            r.model.lo,
            r.model.hi,
            r.delta.point,
            r.delta.lo,
            r.delta.hi,
            r.n
        ));
    }
    out
}

pub fn paths_csv(paths: &[PathSeries]) -> String {
    let mut out = String::from("arm,t,p_hat,sigma_hat\n");
    for s in paths {
        for (t, p, sigma) in &s.points {
            out.push_str(&format!("{},{t},{p},{sigma}\n", s.arm));
        }
    }
    out
}

pub fn run_experiment(
    name: ExperimentName,
    data: &StudyData,
    model: &dyn PersonModel,
    cfg: &ExperimentConfig,
) -> Result<ExperimentResult> {
    cfg.validate()?;
    match name {
        ExperimentName::Pension1y => pension(data, model, cfg, 1),
        ExperimentName::Pension4y => pension(data, model, cfg, 4),
        ExperimentName::Unemployment => unemployment(data, model, cfg),
        ExperimentName::Maternity => maternity(data, model, cfg),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn seed_for(base: u64, label: &str) -> u64 {
    substream(base, label).gen()
}

fn variant_cfg(cfg: &ExperimentConfig, label: &str) -> GenerationConfig {
    let mut g = cfg.generation;
    g.seed = seed_for(cfg.generation.seed, label);
    g
}

fn statuses_within(p: &PersonWithRecords, allowed: &[LabourStatus]) -> bool {
    p.records.iter().all(|r| allowed.contains(&r.labour_status))
}

fn first_record_year(p: &PersonWithRecords) -> Option<i32> {
    p.records.iter().map(|r| r.calendar_year).min()
}

fn record_is_maternity(r: &TabularRecord) -> bool {
    r.maternity_intensity.is_some_and(|v| IntensityLevel::from_ratio(v) >= MATERNITY_THRESHOLD)
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn fmt_f(x: f64) -> String {
    format!("{x}")
}

struct CohortMember {
    idx: usize,
    treated: bool,
    running: f64,
}

/// Truncates, simulates, and measures one scalar outcome per cohort member.
/// The observed outcome comes from the same extractor applied to the full
/// encoded sequence, so a truth-replaying model reproduces it bitwise.
fn simulate_scalar(
    data: &StudyData,
    model: &dyn PersonModel,
    gcfg: &GenerationConfig,
    members: &[CohortMember],
    spec: CutoffSpec,
    extractor_for: &(dyn Fn(&Prefix) -> Box<dyn OutcomeExtractor + '_> + Sync),
    diag: &mut ExperimentDiagnostics,
) -> Result<Vec<CausalSample>> {
    let per_member: Vec<Result<Option<(CausalSample, crate::generate::MonteCarloResult)>>> = members
        .par_iter()
        .map(|m| {
            let full = &data.seqs[m.idx];
            let prefix = match truncate_at_cutoff(full, data.vocab, &spec) {
                Ok(p) => p,
                Err(_) => return Ok(None),
            };
            let extractor = extractor_for(&prefix);
            let y_real = match extractor.extract(full, data.vocab) {
                SimOutcome::Value(v) => v,
                _ => return Ok(None),
            };
            let person_model = model.model_for(full);
            let mc = monte_carlo_outcomes(&prefix, &*person_model, gcfg, &*extractor, data.vocab)?;
            let sample = CausalSample {
                person_id: full.person_id,
                treated: m.treated,
                y_real,
                y_sim: mc.mean,
                running: m.running,
            };
            Ok(Some((sample, mc)))
        })
        .collect();

    let mut samples = Vec::new();
    for r in per_member {
        match r? {
            None => diag.n_dropped += 1,
            Some((sample, mc)) => {
                diag.n_simulations += mc.values.len() + mc.n_censored + mc.n_invalid + mc.n_model_errors;
                diag.n_censored += mc.n_censored;
                diag.n_invalid += mc.n_invalid;
                diag.n_model_errors += mc.n_model_errors;
                if sample.y_sim.is_none() {
                    diag.n_without_sim_outcome += 1;
                }
                samples.push(sample);
            }
        }
    }
    Ok(samples)
}

fn require_cohort(n: usize, min: usize, what: &str) -> Result<()> {
    if n < min {
        return Err(Error::Estimation(format!("{what} cohort has {n} persons, below the minimum {min}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Pension
// ---------------------------------------------------------------------------

fn pension_cohort(data: &StudyData) -> Vec<CohortMember> {
    let mut members = Vec::new();
    for (i, p) in data.persons.iter().enumerate() {
        let pr = &p.profile;
        if pr.sex != Sex::M || !(pr.birth_month == 1 || pr.birth_month == 12) {
            continue;
        }
        if !statuses_within(p, &[LabourStatus::Employee, LabourStatus::Pensioner]) {
            continue;
        }
        let Some(first) = p.records.iter().find(|r| r.labour_status == LabourStatus::Pensioner) else {
            continue;
        };
        let age = age_in_months(pr.birth_year, pr.birth_month, first.calendar_year, first.start_month);
        if !((55 * 12)..=(68 * 12)).contains(&age) {
            continue;
        }
        members.push(CohortMember { idx: i, treated: pr.birth_month == 1, running: age as f64 });
    }
    members
}

fn pension(data: &StudyData, model: &dyn PersonModel, cfg: &ExperimentConfig, years_before: i32) -> Result<ExperimentResult> {
    let name = if years_before == 1 { ExperimentName::Pension1y } else { ExperimentName::Pension4y };
    let members = pension_cohort(data);
    require_cohort(members.len(), cfg.min_cohort, "pension")?;
    let mut diag = ExperimentDiagnostics { n_cohort: members.len(), ..Default::default() };

    // The prefix keeps everything up to `years_before` years ahead of the
    // first pension year; generation resumes right after that boundary.
    let spec = CutoffSpec { anchor_event: AnchorEvent::Retirement, offset_years: 1 - years_before };
    let gcfg = variant_cfg(cfg, name.as_str());
    let samples = simulate_scalar(data, model, &gcfg, &members, spec, &|prefix| {
        Box::new(RetirementAgeMonths { from_year_index: prefix.next_year_index })
    }, &mut diag)?;
    require_cohort(samples.len(), cfg.min_cohort, "pension analysis")?;

    let seed = seed_for(cfg.generation.seed, &format!("{name}-bootstrap"));
    let pa = paired_bootstrap(&samples, ate_diff_means, cfg.bootstrap_draws, seed)?;
    let rows = vec![AteRow {
        label: format!("Pension ({years_before}y cutoff)"),
        empirical: pa.empirical,
        model: pa.model,
        delta: pa.delta,
        n: samples.len(),
    }];

    let figures = if cfg.emit_figures { vec![retirement_figure(data, &samples)] } else { Vec::new() };
    Ok(ExperimentResult { name, rows, paths: Vec::new(), figures, diagnostics: diag })
}

/// Mean retirement age by birth cohort and month, one series per arm.
fn retirement_figure(data: &StudyData, samples: &[CausalSample]) -> PlotTable {
    let by_id: BTreeMap<u64, usize> =
        data.persons.iter().enumerate().map(|(i, p)| (p.profile.person_id, i)).collect();
    let mut groups: BTreeMap<(i32, u32), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in samples {
        let p = &data.persons[by_id[&s.person_id]].profile;
        let entry = groups.entry((p.birth_year, p.birth_month)).or_default();
        entry.0.push(s.y_real);
        if let Some(v) = s.y_sim {
            entry.1.push(v);
        }
    }
    let mut rows = Vec::new();
    for ((year, month), (real, sim)) in &groups {
        for (arm, xs) in [("real", real), ("model", sim)] {
            if xs.is_empty() {
                continue;
            }
            let (mean, sd) = mean_sd(xs);
            rows.push(vec![year.to_string(), month.to_string(), arm.into(), xs.len().to_string(), fmt_f(mean), fmt_f(sd)]);
        }
    }
    PlotTable {
        name: "retirement_age_by_cohort".into(),
        header: ["birth_year", "birth_month", "arm", "n", "mean_age_months", "sd_months"].map(String::from).to_vec(),
        rows,
    }
}

// ---------------------------------------------------------------------------
// Unemployment
// ---------------------------------------------------------------------------

fn unemployment_cohort(data: &StudyData) -> Vec<CohortMember> {
    let mut members = Vec::new();
    for (i, p) in data.persons.iter().enumerate() {
        if !statuses_within(p, &[LabourStatus::Employee, LabourStatus::Mobility, LabourStatus::Pensioner]) {
            continue;
        }
        let Some(first) = p.records.iter().find(|r| r.labour_status == LabourStatus::Mobility) else {
            continue;
        };
        let pr = &p.profile;
        let age = age_in_months(pr.birth_year, pr.birth_month, first.calendar_year, first.start_month);
        if !(360..=600).contains(&age) {
            continue;
        }
        // Employed in the north when the firm closed: the last employment
        // record before the spell decides.
        let north = p
            .records
            .iter()
            .filter(|r| {
                r.labour_status == LabourStatus::Employee
                    && (r.calendar_year, r.start_month) < (first.calendar_year, first.start_month)
            })
            .next_back()
            .and_then(|r| r.work_province)
            .is_some_and(|code| province_region(code) == Region::North);
        if !north {
            continue;
        }
        members.push(CohortMember { idx: i, treated: age as f64 >= BENEFIT_AGE_CUTOFF, running: age as f64 });
    }
    members
}

fn unemployment(data: &StudyData, model: &dyn PersonModel, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let members = unemployment_cohort(data);
    require_cohort(members.len(), cfg.min_cohort, "unemployment")?;
    let mut diag = ExperimentDiagnostics { n_cohort: members.len(), ..Default::default() };

    // The prefix ends the year before the first benefit spell, so the whole
    // spell is left to the model.
    let spec = CutoffSpec { anchor_event: AnchorEvent::FirstUnemployment, offset_years: 0 };
    let gcfg = variant_cfg(cfg, ExperimentName::Unemployment.as_str());
    let samples = simulate_scalar(data, model, &gcfg, &members, spec, &|prefix| {
        Box::new(FirstBenefitMonths { from_year_index: prefix.next_year_index })
    }, &mut diag)?;
    require_cohort(samples.len(), cfg.min_cohort, "unemployment analysis")?;

    let mut rows = Vec::new();
    for (ri, h) in BENEFIT_BANDWIDTHS.into_iter().enumerate() {
        let window: Vec<CausalSample> =
            samples.iter().filter(|s| (s.running - BENEFIT_AGE_CUTOFF).abs() <= h).cloned().collect();
        let seed = seed_for(cfg.generation.seed, &format!("unemployment-bootstrap-{ri}"));
        let pa = paired_bootstrap(
            &window,
            |s, field| local_ate_rdd(s, field, BENEFIT_AGE_CUTOFF, h),
            cfg.bootstrap_draws,
            seed,
        )?;
        rows.push(AteRow {
            label: format!("Unemployment +/-{}m", h as i32),
            empirical: pa.empirical,
            model: pa.model,
            delta: pa.delta,
            n: window.len(),
        });
    }

    let figures = if cfg.emit_figures { vec![duration_figure(&samples)] } else { Vec::new() };
    Ok(ExperimentResult { name: ExperimentName::Unemployment, rows, paths: Vec::new(), figures, diagnostics: diag })
}

/// Mean first-spell duration by age at displacement, in year-wide bins over
/// a ten-year band around the cutoff.
fn duration_figure(samples: &[CausalSample]) -> PlotTable {
    let lo = BENEFIT_AGE_CUTOFF - 120.0;
    let mut bins: BTreeMap<i32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in samples {
        if (s.running - BENEFIT_AGE_CUTOFF).abs() > 120.0 {
            continue;
        }
        let bin = (((s.running - lo) / 12.0).floor() as i32).min(19);
        let entry = bins.entry(bin).or_default();
        entry.0.push(s.y_real);
        if let Some(v) = s.y_sim {
            entry.1.push(v);
        }
    }
    let mut rows = Vec::new();
    for (bin, (real, sim)) in &bins {
        let (age_lo, age_hi) = (lo + 12.0 * *bin as f64, lo + 12.0 * (*bin + 1) as f64);
        for (arm, xs) in [("real", real), ("model", sim)] {
            if xs.is_empty() {
                continue;
            }
            let (mean, sd) = mean_sd(xs);
            rows.push(vec![fmt_f(age_lo), fmt_f(age_hi), arm.into(), xs.len().to_string(), fmt_f(mean), fmt_f(sd)]);
        }
    }
    PlotTable {
        name: "benefit_duration_by_age".into(),
        header: ["age_lo_months", "age_hi_months", "arm", "n", "mean_months", "sd_months"].map(String::from).to_vec(),
        rows,
    }
}

// ---------------------------------------------------------------------------
// Maternity
// ---------------------------------------------------------------------------

struct Mother {
    idx: usize,
    event_year: i32,
}

fn maternity_cohorts(data: &StudyData) -> (Vec<Mother>, Vec<usize>) {
    let mut mothers = Vec::new();
    let mut pool = Vec::new();
    for (i, p) in data.persons.iter().enumerate() {
        if p.profile.sex != Sex::F || !statuses_within(p, &[LabourStatus::Employee]) {
            continue;
        }
        let Some(first_year) = first_record_year(p) else { continue };
        match p.records.iter().find(|r| record_is_maternity(r)) {
            Some(rec) => {
                let event_year = rec.calendar_year;
                // Enough pre-years for the reference period and enough
                // post-years for the longest penalty window.
                if event_year - first_year >= PRE_YEARS && event_year + POST_YEARS <= OBSERVATION_END {
                    mothers.push(Mother { idx: i, event_year });
                }
            }
            None => pool.push(i),
        }
    }
    (mothers, pool)
}

/// Pre-birth matching covariates: birth year, birth area, career start
/// year, and first-sector indicators (first level omitted).
fn covariates(data: &StudyData, idx: usize, sectors: &[String]) -> Vec<f64> {
    let p = &data.persons[idx];
    let first = p.records.first();
    let mut cov = vec![
        p.profile.birth_year as f64,
        p.profile.birth_area as f64,
        first.map_or(0.0, |r| r.calendar_year as f64),
    ];
    let sector = first.and_then(|r| r.sector.clone()).unwrap_or_default();
    for s in &sectors[1..] {
        cov.push(if *s == sector { 1.0 } else { 0.0 });
    }
    cov
}

fn yearly_income(data: &StudyData, idx: usize, year: i32) -> SimOutcome {
    YearlyIncome { year_index: year - YEAR_INDEX_BASE, quantizer: data.quantizer }.extract(&data.seqs[idx], data.vocab)
}

fn path_series(arm: &str, path: &PenaltyPath) -> PathSeries {
    let points = path.p.iter().map(|(&t, &p)| (t, p, path.sigma.get(&t).copied().unwrap_or(0.0))).collect();
    PathSeries { arm: arm.into(), points }
}

fn percent(r: &PenaltyPath) -> &PenaltyPath {
    r
}

fn scale_ate(point: f64, lo: f64, hi: f64, n: usize, b: usize) -> AteResult {
    AteResult { point: 100.0 * point, lo: 100.0 * lo, hi: 100.0 * hi, n, b }
}

fn maternity(data: &StudyData, model: &dyn PersonModel, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let (mothers, pool) = maternity_cohorts(data);
    require_cohort(mothers.len(), cfg.min_cohort, "mother")?;
    require_cohort(pool.len(), cfg.min_cohort, "non-mother")?;
    let mut diag = ExperimentDiagnostics {
        n_cohort: mothers.len(),
        n_control_pool: pool.len(),
        ..Default::default()
    };

    // Propensity matching on pre-birth covariates over the common support.
    let sectors: Vec<String> = {
        let mut set = BTreeSet::new();
        for &i in mothers.iter().map(|m| &m.idx).chain(&pool) {
            set.insert(data.persons[i].records.first().and_then(|r| r.sector.clone()).unwrap_or_default());
        }
        set.into_iter().collect()
    };
    let mother_cands: Vec<MatchCandidate> = mothers
        .iter()
        .map(|m| MatchCandidate { person_id: data.persons[m.idx].profile.person_id, covariates: covariates(data, m.idx, &sectors) })
        .collect();
    let pool_cands: Vec<MatchCandidate> = pool
        .iter()
        .map(|&i| MatchCandidate { person_id: data.persons[i].profile.person_id, covariates: covariates(data, i, &sectors) })
        .collect();
    let report = propensity_match(&mother_cands, &pool_cands)?;
    diag.n_matched = report.pairs.len();

    let by_id: BTreeMap<u64, usize> =
        data.persons.iter().enumerate().map(|(i, p)| (p.profile.person_id, i)).collect();
    let event_year_of: BTreeMap<u64, i32> =
        mothers.iter().map(|m| (data.persons[m.idx].profile.person_id, m.event_year)).collect();

    // Mothers' panel: dequantized yearly incomes around the event.
    let mut panel_m = EventPanel::default();
    for m in &mothers {
        let p = &data.persons[m.idx];
        for t in -PRE_YEARS..=POST_YEARS {
            let year = m.event_year + t;
            if let SimOutcome::Value(v) = yearly_income(data, m.idx, year) {
                panel_m.rows.push(PanelRow {
                    person_id: p.profile.person_id,
                    year,
                    event_time: t,
                    outcome: v,
                    age: year - p.profile.birth_year,
                    group: Group::M,
                });
            }
        }
    }

    // Matched controls, aligned to their mother's event year. Controls must
    // already be observed over the mother's pre-window.
    let mut panel_nm = EventPanel::default();
    for pair in &report.pairs {
        let c_idx = by_id[&pair.control_id];
        let event_year = event_year_of[&pair.treated_id];
        let control = &data.persons[c_idx];
        if first_record_year(control).is_none_or(|y| y > event_year - PRE_YEARS) {
            diag.n_pairs_unaligned += 1;
            continue;
        }
        for t in -PRE_YEARS..=POST_YEARS {
            let year = event_year + t;
            if let SimOutcome::Value(v) = yearly_income(data, c_idx, year) {
                panel_nm.rows.push(PanelRow {
                    person_id: control.profile.person_id,
                    year,
                    event_time: t,
                    outcome: v,
                    age: year - control.profile.birth_year,
                    group: Group::Nm,
                });
            }
        }
    }

    let fit_m = event_study_ols(&panel_m, Group::M)?;
    let path_m = counterfactual_income(&fit_m, &panel_m, Group::M)?.path;
    let fit_nm = event_study_ols(&panel_nm, Group::Nm)?;
    let path_matched = counterfactual_income(&fit_nm, &panel_nm, Group::Nm)?.path;

    // Simulated no-maternity controls: continue each mother from the year
    // of the event and average surviving simulations per mother-year.
    let gcfg_c = variant_cfg(cfg, "maternity-controls");
    let spec_c = CutoffSpec { anchor_event: AnchorEvent::FirstMaternity, offset_years: 0 };
    let sim_results: Vec<Result<(usize, Vec<(i32, f64)>, SimCounts)>> = mothers
        .par_iter()
        .map(|m| {
            let full = &data.seqs[m.idx];
            let mut counts = SimCounts::default();
            let prefix = match truncate_at_cutoff(full, data.vocab, &spec_c) {
                Ok(p) => p,
                Err(_) => {
                    counts.dropped = true;
                    return Ok((m.idx, Vec::new(), counts));
                }
            };
            let person_model = model.model_for(full);
            let mut per_year: BTreeMap<i32, Vec<f64>> = BTreeMap::new();
            for k in 0..cfg.generation.n_simulations {
                counts.sims += 1;
                let mut rng = simulation_rng(gcfg_c.seed, full.person_id, k as u64);
                let g = match crate::generate::generate(&prefix, &*person_model, &gcfg_c, &mut rng) {
                    Ok(g) => g,
                    Err(_) => {
                        counts.model_errors += 1;
                        continue;
                    }
                };
                let hist = match parse_years_lenient(&g.seq, data.vocab) {
                    Ok(h) => h,
                    Err(_) => {
                        counts.invalid += 1;
                        continue;
                    }
                };
                if cfg.no_maternity_controls
                    && hist.years.iter().any(|y| {
                        y.events.iter().any(|e| e.maternity_intensity.is_some_and(|l| l >= MATERNITY_THRESHOLD))
                    })
                {
                    counts.with_maternity += 1;
                    continue;
                }
                for t in 0..=POST_YEARS {
                    let year = m.event_year + t;
                    let ex = YearlyIncome { year_index: year - YEAR_INDEX_BASE, quantizer: data.quantizer };
                    match ex.extract(&g.seq, data.vocab) {
                        SimOutcome::Value(v) => per_year.entry(t).or_default().push(v),
                        SimOutcome::Censored => counts.censored += 1,
                        SimOutcome::Invalid => counts.invalid += 1,
                    }
                }
            }
            let means: Vec<(i32, f64)> = per_year
                .into_iter()
                .map(|(t, vs)| (t, vs.iter().sum::<f64>() / vs.len() as f64))
                .collect();
            Ok((m.idx, means, counts))
        })
        .collect();

    let mut panel_sim = EventPanel::default();
    for r in sim_results {
        let (idx, means, counts) = r?;
        counts.fold_into(&mut diag);
        let p = &data.persons[idx];
        let event_year = mothers.iter().find(|m| m.idx == idx).expect("mother index").event_year;
        // The pre-event rows are the mother's own observed years; only the
        // continuation is counterfactual.
        for t in -PRE_YEARS..=-1 {
            let year = event_year + t;
            if let SimOutcome::Value(v) = yearly_income(data, idx, year) {
                panel_sim.rows.push(PanelRow {
                    person_id: p.profile.person_id,
                    year,
                    event_time: t,
                    outcome: v,
                    age: year - p.profile.birth_year,
                    group: Group::Nm,
                });
            }
        }
        let mut covered = 0;
        for (t, mean) in means {
            covered += 1;
            let year = event_year + t;
            panel_sim.rows.push(PanelRow {
                person_id: p.profile.person_id,
                year,
                event_time: t,
                outcome: mean,
                age: year - p.profile.birth_year,
                group: Group::Nm,
            });
        }
        diag.n_mother_years_uncovered += (POST_YEARS + 1 - covered) as usize;
    }
    let fit_sim = event_study_ols(&panel_sim, Group::Nm)?;
    let path_sim = counterfactual_income(&fit_sim, &panel_sim, Group::Nm)?.path;

    // Window means in percent: empirical pairing, model pairing, and their
    // paired difference.
    let n_mothers = mothers.len();
    let mut rows = Vec::new();
    for (ri, (a, b)) in PENALTY_WINDOWS.into_iter().enumerate() {
        let emp = child_penalty(
            percent(&path_m),
            &path_matched,
            (a, b),
            cfg.bootstrap_draws,
            seed_for(cfg.generation.seed, &format!("maternity-emp-{ri}")),
        )?;
        let mdl = child_penalty(
            &path_m,
            &path_sim,
            (a, b),
            cfg.bootstrap_draws,
            seed_for(cfg.generation.seed, &format!("maternity-model-{ri}")),
        )?;
        let dlt = penalty_delta(
            &path_m,
            &path_sim,
            &path_matched,
            (a, b),
            cfg.bootstrap_draws,
            seed_for(cfg.generation.seed, &format!("maternity-delta-{ri}")),
        )?;
        rows.push(AteRow {
            label: format!("Maternity {a}-{b} years (%)"),
            empirical: scale_ate(emp.point, emp.lo, emp.hi, n_mothers, emp.b),
            model: scale_ate(mdl.point, mdl.lo, mdl.hi, n_mothers, mdl.b),
            delta: scale_ate(dlt.point, dlt.lo, dlt.hi, n_mothers, dlt.b),
            n: n_mothers,
        });
    }

    let paths = vec![
        path_series("mothers", &path_m),
        path_series("matched_non_mothers", &path_matched),
        path_series("simulated_controls", &path_sim),
    ];

    let figures = if cfg.emit_figures {
        vec![income_paths_figure(data, model, cfg, &mothers, &mut diag)?]
    } else {
        Vec::new()
    };

    Ok(ExperimentResult { name: ExperimentName::Maternity, rows, paths, figures, diagnostics: diag })
}

#[derive(Default)]
struct SimCounts {
    sims: usize,
    censored: usize,
    invalid: usize,
    model_errors: usize,
    with_maternity: usize,
    dropped: bool,
}

impl SimCounts {
    fn fold_into(&self, diag: &mut ExperimentDiagnostics) {
        diag.n_simulations += self.sims;
        diag.n_censored += self.censored;
        diag.n_invalid += self.invalid;
        diag.n_model_errors += self.model_errors;
        diag.n_sims_with_maternity += self.with_maternity;
        if self.dropped {
            diag.n_dropped += 1;
        }
    }
}

/// Real and simulated mean income paths around the first maternity year.
/// The simulated arm keeps the event year observed and continues from the
/// following year.
fn income_paths_figure(
    data: &StudyData,
    model: &dyn PersonModel,
    cfg: &ExperimentConfig,
    mothers: &[Mother],
    diag: &mut ExperimentDiagnostics,
) -> Result<PlotTable> {
    let mut real: BTreeMap<i32, Vec<f64>> = BTreeMap::new();
    for m in mothers {
        for t in -POST_YEARS..=POST_YEARS {
            if let SimOutcome::Value(v) = yearly_income(data, m.idx, m.event_year + t) {
                real.entry(t).or_default().push(v);
            }
        }
    }

    let gcfg_t = variant_cfg(cfg, "maternity-treated");
    let spec_t = CutoffSpec { anchor_event: AnchorEvent::FirstMaternity, offset_years: 1 };
    let per_mother: Vec<Result<(Vec<(i32, f64)>, SimCounts)>> = mothers
        .par_iter()
        .map(|m| {
            let full = &data.seqs[m.idx];
            let mut counts = SimCounts::default();
            let prefix = match truncate_at_cutoff(full, data.vocab, &spec_t) {
                Ok(p) => p,
                Err(_) => {
                    counts.dropped = true;
                    return Ok((Vec::new(), counts));
                }
            };
            let person_model = model.model_for(full);
            let mut values = Vec::new();
            for k in 0..cfg.generation.n_simulations {
                counts.sims += 1;
                let mut rng = simulation_rng(gcfg_t.seed, full.person_id, k as u64);
                let g = match crate::generate::generate(&prefix, &*person_model, &gcfg_t, &mut rng) {
                    Ok(g) => g,
                    Err(_) => {
                        counts.model_errors += 1;
                        continue;
                    }
                };
                for t in 1..=POST_YEARS {
                    let ex = YearlyIncome { year_index: m.event_year + t - YEAR_INDEX_BASE, quantizer: data.quantizer };
                    match ex.extract(&g.seq, data.vocab) {
                        SimOutcome::Value(v) => values.push((t, v)),
                        SimOutcome::Censored => counts.censored += 1,
                        SimOutcome::Invalid => counts.invalid += 1,
                    }
                }
            }
            Ok((values, counts))
        })
        .collect();

    let mut sim: BTreeMap<i32, Vec<f64>> = BTreeMap::new();
    for r in per_mother {
        let (values, counts) = r?;
        counts.fold_into(diag);
        for (t, v) in values {
            sim.entry(t).or_default().push(v);
        }
    }

    let mut rows = Vec::new();
    for (arm, series) in [("real", &real), ("simulated", &sim)] {
        for (t, xs) in series {
            if xs.is_empty() {
                continue;
            }
            let (mean, sd) = mean_sd(xs);
            rows.push(vec![t.to_string(), arm.into(), xs.len().to_string(), fmt_f(mean), fmt_f(sd)]);
        }
    }
    Ok(PlotTable {
        name: "maternity_income_paths".into(),
        header: ["t", "arm", "n", "mean_income", "sd_income"].map(String::from).to_vec(),
        rows,
    })
}
