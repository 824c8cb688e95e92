//! Treatment-effect estimators over person-level outcomes: difference in
//! means, local effects around a running-variable cutoff, paired bootstrap
//! intervals, event-study least squares with robust errors, counterfactual
//! normalization, window-averaged penalties with parametric bootstrap, and
//! propensity-score matching.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::substream_indexed;
use crate::{Error, Result};

/// Which outcome column an estimator reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeField {
    /// The observed outcome.
    Real,
    /// The per-person Monte Carlo mean of simulated outcomes.
    Sim,
}

/// One person in an analysis sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalSample {
    pub person_id: u64,
    pub treated: bool,
    pub y_real: f64,
    /// Absent when every simulation was censored or invalid.
    pub y_sim: Option<f64>,
    /// Running variable for cutoff designs (months).
    pub running: f64,
}

impl CausalSample {
    fn outcome(&self, field: OutcomeField) -> Option<f64> {
        match field {
            OutcomeField::Real => Some(self.y_real),
            OutcomeField::Sim => self.y_sim,
        }
    }
}

/// Point estimate with a 95% percentile interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AteResult {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub b: usize,
}

/// Difference of treated and control outcome means. Samples without the
/// requested outcome are dropped.
pub fn ate_diff_means(samples: &[CausalSample], field: OutcomeField) -> Result<f64> {
    let (mut sum1, mut n1, mut sum0, mut n0) = (0.0, 0usize, 0.0, 0usize);
    for s in samples {
        let Some(y) = s.outcome(field) else { continue };
        if s.treated {
            sum1 += y;
            n1 += 1;
        } else {
            sum0 += y;
            n0 += 1;
        }
    }
    if n1 == 0 || n0 == 0 {
        return Err(Error::Estimation(format!("empty group: {n1} treated, {n0} control")));
    }
    Ok(sum1 / n1 as f64 - sum0 / n0 as f64)
}

/// Local effect at a running-variable cutoff: restrict to the window
/// `|running - cutoff| <= bandwidth`, treat everyone at or above the
/// cutoff, then difference the means.
pub fn local_ate_rdd(samples: &[CausalSample], field: OutcomeField, cutoff: f64, bandwidth: f64) -> Result<f64> {
    let windowed: Vec<CausalSample> = samples
        .iter()
        .filter(|s| (s.running - cutoff).abs() <= bandwidth)
        .map(|s| CausalSample { treated: s.running >= cutoff, ..s.clone() })
        .collect();
    if windowed.is_empty() {
        return Err(Error::Estimation(format!("no samples within {bandwidth} of {cutoff}")));
    }
    ate_diff_means(&windowed, field)
        .map_err(|e| Error::Estimation(format!("window {bandwidth} around {cutoff}: {e}")))
}

/// Linear-interpolation quantile of pre-sorted values.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn percentile_ci(draws: &[f64]) -> (f64, f64) {
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    (quantile_sorted(&sorted, 0.025), quantile_sorted(&sorted, 0.975))
}

/// Paired-bootstrap output: empirical and model arms plus their signed
/// difference, with the resample draws kept for diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedAte {
    pub empirical: AteResult,
    pub model: AteResult,
    pub delta: AteResult,
    /// Resamples where the estimator failed (for example an empty group).
    pub n_failed_resamples: usize,
    pub draws_empirical: Vec<f64>,
    pub draws_model: Vec<f64>,
    pub draws_delta: Vec<f64>,
}

/// Resamples persons with replacement and recomputes the estimator on both
/// outcome columns of the same resample, so the difference of the arms has
/// a joint distribution. Intervals are 95% percentile over `b` resamples.
/// Resample seeds derive from (seed, iteration), so the draw order is
/// immaterial.
pub fn paired_bootstrap<F>(samples: &[CausalSample], estimator: F, b: usize, seed: u64) -> Result<PairedAte>
where
    F: Fn(&[CausalSample], OutcomeField) -> Result<f64>,
{
    if b < 2 {
        return Err(Error::Estimation(format!("{b} resamples cannot form an interval")));
    }
    if samples.is_empty() {
        return Err(Error::Estimation("empty sample".into()));
    }
    let point_emp = estimator(samples, OutcomeField::Real)?;
    let point_model = estimator(samples, OutcomeField::Sim)?;

    let n = samples.len();
    let mut draws_empirical = Vec::with_capacity(b);
    let mut draws_model = Vec::with_capacity(b);
    let mut draws_delta = Vec::with_capacity(b);
    let mut n_failed_resamples = 0usize;
    let mut resample = Vec::with_capacity(n);
    for i in 0..b {
        let mut rng = substream_indexed(seed, "bootstrap", i as u64);
        resample.clear();
        resample.extend((0..n).map(|_| samples[rng.gen_range(0..n)].clone()));
        match (estimator(&resample, OutcomeField::Real), estimator(&resample, OutcomeField::Sim)) {
            (Ok(e), Ok(m)) => {
                draws_empirical.push(e);
                draws_model.push(m);
                draws_delta.push(m - e);
            }
            _ => n_failed_resamples += 1,
        }
    }
    if draws_empirical.len() < 2 {
        return Err(Error::Estimation(format!("{n_failed_resamples} of {b} resamples failed")));
    }
    let wrap = |point: f64, draws: &[f64]| {
        let (lo, hi) = percentile_ci(draws);
        AteResult { point, lo, hi, n, b }
    };
    Ok(PairedAte {
        empirical: wrap(point_emp, &draws_empirical),
        model: wrap(point_model, &draws_model),
        delta: wrap(point_model - point_emp, &draws_delta),
        n_failed_resamples,
        draws_empirical,
        draws_model,
        draws_delta,
    })
}

/// Treatment arm of an event panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    /// Treated (mothers).
    M,
    /// Control (non-mothers, matched or simulated).
    Nm,
}

/// One person-year observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub person_id: u64,
    pub year: i32,
    /// Years since the anchoring event; -1 is the reference period.
    pub event_time: i32,
    pub outcome: f64,
    pub age: i32,
    pub group: Group,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventPanel {
    pub rows: Vec<PanelRow>,
}

/// A coefficient with its heteroskedasticity-robust standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coef {
    pub estimate: f64,
    pub se: f64,
}

/// Least-squares fit of outcome on event-time, age, and year dummies.
/// The level sits in the intercept; one reference level per block is
/// omitted (event time -1, the smallest age, the smallest year).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventStudyFit {
    pub intercept: Coef,
    pub alpha: BTreeMap<i32, Coef>,
    pub beta_age: BTreeMap<i32, Coef>,
    pub gamma_year: BTreeMap<i32, Coef>,
    pub reference_age: i32,
    pub reference_year: i32,
    pub n_rows: usize,
}

/// Dense row-major matrix, just big enough for small regression problems.
#[derive(Debug, Clone)]
struct Mat {
    r: usize,
    c: usize,
    a: Vec<f64>,
}

impl Mat {
    fn zeros(r: usize, c: usize) -> Mat {
        Mat { r, c, a: vec![0.0; r * c] }
    }
    fn at(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.c + j]
    }
    fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.a[i * self.c + j]
    }
}

/// Householder QR solve of min ||Xb - y||. Returns the coefficients and
/// the inverse of the upper-triangular factor, from which (X'X)^-1 =
/// R^-1 R^-T. Columns whose pivot collapses are reported by label.
fn qr_solve(x: &Mat, y: &[f64], labels: &[String]) -> Result<(Vec<f64>, Mat)> {
    let (n, p) = (x.r, x.c);
    if n < p {
        return Err(Error::Estimation(format!("{n} rows cannot identify {p} coefficients")));
    }
    let mut a = x.clone();
    let mut b = y.to_vec();
    for j in 0..p {
        // Householder vector for column j below the diagonal.
        let mut norm2 = 0.0;
        for i in j..n {
            norm2 += a.at(i, j) * a.at(i, j);
        }
        let norm = norm2.sqrt();
        if norm == 0.0 {
            continue; // pivot check below reports the dead column
        }
        let alpha = if a.at(j, j) >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (j..n).map(|i| a.at(i, j)).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|t| t * t).sum();
        if vnorm2 > 0.0 {
            for col in j..p {
                let dot: f64 = (j..n).map(|i| v[i - j] * a.at(i, col)).sum();
                let f = 2.0 * dot / vnorm2;
                for i in j..n {
                    *a.at_mut(i, col) -= f * v[i - j];
                }
            }
            let dot: f64 = (j..n).map(|i| v[i - j] * b[i]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..n {
                b[i] -= f * v[i - j];
            }
        }
    }
    let max_diag = (0..p).map(|j| a.at(j, j).abs()).fold(0.0, f64::max);
    let tol = max_diag * 1e-10;
    for j in 0..p {
        if a.at(j, j).abs() <= tol {
            return Err(Error::Estimation(format!("design is rank deficient at column '{}'", labels[j])));
        }
    }
    // Back-substitute R beta = Q'y.
    let mut beta = vec![0.0; p];
    for j in (0..p).rev() {
        let mut s = b[j];
        for k in j + 1..p {
            s -= a.at(j, k) * beta[k];
        }
        beta[j] = s / a.at(j, j);
    }
    // Invert R by back-substituting each unit column.
    let mut rinv = Mat::zeros(p, p);
    for col in 0..p {
        for j in (0..=col).rev() {
            let mut s = if j == col { 1.0 } else { 0.0 };
            for k in j + 1..=col {
                s -= a.at(j, k) * rinv.at(k, col);
            }
            *rinv.at_mut(j, col) = s / a.at(j, j);
        }
    }
    Ok((beta, rinv))
}

/// HC1 standard errors: (X'X)^-1 (sum e_i^2 x_i x_i') (X'X)^-1 scaled by
/// n/(n-p).
fn hc1_errors(x: &Mat, residuals: &[f64], rinv: &Mat) -> Vec<f64> {
    let (n, p) = (x.r, x.c);
    let mut xtx_inv = Mat::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            let mut s = 0.0;
            for k in i.max(j)..p {
                s += rinv.at(i, k) * rinv.at(j, k);
            }
            *xtx_inv.at_mut(i, j) = s;
        }
    }
    let mut meat = Mat::zeros(p, p);
    for row in 0..n {
        let w = residuals[row] * residuals[row];
        for i in 0..p {
            let xi = x.at(row, i);
            if xi == 0.0 {
                continue;
            }
            for j in 0..p {
                *meat.at_mut(i, j) += w * xi * x.at(row, j);
            }
        }
    }
    let scale = n as f64 / (n - p) as f64;
    let mut se = vec![0.0; p];
    for i in 0..p {
        let mut var = 0.0;
        for k in 0..p {
            let mut left = 0.0;
            for l in 0..p {
                left += xtx_inv.at(i, l) * meat.at(l, k);
            }
            var += left * xtx_inv.at(i, k);
        }
        se[i] = (scale * var).sqrt();
    }
    se
}

fn group_rows<'p>(panel: &'p EventPanel, group: Group) -> Vec<&'p PanelRow> {
    panel.rows.iter().filter(|r| r.group == group).collect()
}

/// Fits the event-study regression on one group's rows. Every person must
/// contribute a reference-period row (event time -1).
pub fn event_study_ols(panel: &EventPanel, group: Group) -> Result<EventStudyFit> {
    let rows = group_rows(panel, group);
    if rows.is_empty() {
        return Err(Error::Estimation("no rows for the requested group".into()));
    }
    let mut with_ref = BTreeSet::new();
    let mut persons = BTreeSet::new();
    for r in &rows {
        persons.insert(r.person_id);
        if r.event_time == -1 {
            with_ref.insert(r.person_id);
        }
    }
    if with_ref.len() != persons.len() {
        let missing = persons.difference(&with_ref).next().unwrap();
        return Err(Error::Estimation(format!("person {missing} has no reference-period row (event time -1)")));
    }

    let times: Vec<i32> = rows.iter().map(|r| r.event_time).filter(|&t| t != -1).collect::<BTreeSet<_>>().into_iter().collect();
    let ages: Vec<i32> = rows.iter().map(|r| r.age).collect::<BTreeSet<_>>().into_iter().collect();
    let years: Vec<i32> = rows.iter().map(|r| r.year).collect::<BTreeSet<_>>().into_iter().collect();
    let (reference_age, age_levels) = ages.split_first().expect("nonempty");
    let (reference_year, year_levels) = years.split_first().expect("nonempty");

    let p = 1 + times.len() + age_levels.len() + year_levels.len();
    let mut labels = vec!["intercept".to_string()];
    labels.extend(times.iter().map(|t| format!("event_time={t}")));
    labels.extend(age_levels.iter().map(|k| format!("age={k}")));
    labels.extend(year_levels.iter().map(|y| format!("year={y}")));

    let n = rows.len();
    let mut x = Mat::zeros(n, p);
    let mut y = vec![0.0; n];
    for (i, r) in rows.iter().enumerate() {
        *x.at_mut(i, 0) = 1.0;
        if let Ok(j) = times.binary_search(&r.event_time) {
            *x.at_mut(i, 1 + j) = 1.0;
        }
        if let Ok(j) = age_levels.binary_search(&r.age) {
            *x.at_mut(i, 1 + times.len() + j) = 1.0;
        }
        if let Ok(j) = year_levels.binary_search(&r.year) {
            *x.at_mut(i, 1 + times.len() + age_levels.len() + j) = 1.0;
        }
        y[i] = r.outcome;
    }
    let (beta, rinv) = qr_solve(&x, &y, &labels)?;
    let residuals: Vec<f64> = (0..n)
        .map(|i| y[i] - (0..p).map(|j| x.at(i, j) * beta[j]).sum::<f64>())
        .collect();
    let se = hc1_errors(&x, &residuals, &rinv);

    let coef = |j: usize| Coef { estimate: beta[j], se: se[j] };
    Ok(EventStudyFit {
        intercept: coef(0),
        alpha: times.iter().enumerate().map(|(j, &t)| (t, coef(1 + j))).collect(),
        beta_age: age_levels.iter().enumerate().map(|(j, &k)| (k, coef(1 + times.len() + j))).collect(),
        gamma_year: year_levels
            .iter()
            .enumerate()
            .map(|(j, &yv)| (yv, coef(1 + times.len() + age_levels.len() + j)))
            .collect(),
        reference_age: *reference_age,
        reference_year: *reference_year,
        n_rows: n,
    })
}

/// Event-time path of percentage effects with their standard errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PenaltyPath {
    pub p: BTreeMap<i32, f64>,
    pub sigma: BTreeMap<i32, f64>,
}

/// Counterfactual outcome per row plus the normalized effect path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterfactualIncome {
    /// Predicted outcome from the level, age, and year components, aligned
    /// to the group's rows in panel order.
    pub y_tilde: Vec<f64>,
    pub path: PenaltyPath,
}

/// Normalizes event coefficients by the mean counterfactual outcome at each
/// event time: the counterfactual is the fit with every event coefficient
/// removed, so it carries only level, age, and year structure. The
/// reference period maps to zero by construction.
pub fn counterfactual_income(fit: &EventStudyFit, panel: &EventPanel, group: Group) -> Result<CounterfactualIncome> {
    let rows = group_rows(panel, group);
    if rows.is_empty() {
        return Err(Error::Estimation("no rows for the requested group".into()));
    }
    let y_tilde: Vec<f64> = rows
        .iter()
        .map(|r| {
            fit.intercept.estimate
                + fit.beta_age.get(&r.age).map_or(0.0, |c| c.estimate)
                + fit.gamma_year.get(&r.year).map_or(0.0, |c| c.estimate)
        })
        .collect();

    let mut by_time: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
    for (r, &yt) in rows.iter().zip(&y_tilde) {
        let e = by_time.entry(r.event_time).or_insert((0.0, 0));
        e.0 += yt;
        e.1 += 1;
    }
    let mut p = BTreeMap::new();
    let mut sigma = BTreeMap::new();
    for (&t, &(sum, count)) in &by_time {
        let denom = sum / count as f64;
        if denom <= 0.0 {
            return Err(Error::Estimation(format!(
                "mean counterfactual outcome at event time {t} is {denom}; normalization undefined"
            )));
        }
        let coef = fit.alpha.get(&t).copied().unwrap_or(Coef { estimate: 0.0, se: 0.0 });
        p.insert(t, coef.estimate / denom);
        sigma.insert(t, coef.se / denom);
    }
    Ok(CounterfactualIncome { y_tilde, path: PenaltyPath { p, sigma } })
}

/// Window-averaged penalty with its per-time path and a percentile CI.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PenaltyEstimate {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub per_time: BTreeMap<i32, f64>,
    pub b: usize,
}

fn window_terms(path: &PenaltyPath, window: (i32, i32), arm: &str) -> Result<Vec<(i32, f64, f64)>> {
    let (a, b) = window;
    if a > b {
        return Err(Error::Estimation(format!("window [{a}, {b}] is empty")));
    }
    (a..=b)
        .map(|t| {
            let p = path.p.get(&t).ok_or_else(|| Error::Estimation(format!("{arm} arm has no effect at event time {t}")))?;
            let s = path
                .sigma
                .get(&t)
                .ok_or_else(|| Error::Estimation(format!("{arm} arm has no standard error at event time {t}")))?;
            Ok((t, *p, *s))
        })
        .collect()
}

/// Difference of the two arms' percentage paths averaged over an event-time
/// window. The interval comes from a parametric Gaussian bootstrap: each
/// iteration redraws every per-time effect from its reported normal and
/// re-forms the window mean.
pub fn child_penalty(
    treated: &PenaltyPath,
    control: &PenaltyPath,
    window: (i32, i32),
    b: usize,
    seed: u64,
) -> Result<PenaltyEstimate> {
    if b < 2 {
        return Err(Error::Estimation(format!("{b} draws cannot form an interval")));
    }
    let tm = window_terms(treated, window, "treated")?;
    let cm = window_terms(control, window, "control")?;
    let per_time: BTreeMap<i32, f64> = tm.iter().zip(&cm).map(|(&(t, pm, _), &(_, pc, _))| (t, pm - pc)).collect();
    let width = per_time.len() as f64;
    let point = per_time.values().sum::<f64>() / width;

    let mut draws = Vec::with_capacity(b);
    for i in 0..b {
        let mut rng = substream_indexed(seed, "penalty", i as u64);
        let mut total = 0.0;
        for (&(_, pm, sm), &(_, pc, sc)) in tm.iter().zip(&cm) {
            let zm: f64 = rng.sample(StandardNormal);
            let zc: f64 = rng.sample(StandardNormal);
            total += (pm + sm * zm) - (pc + sc * zc);
        }
        draws.push(total / width);
    }
    let (lo, hi) = percentile_ci(&draws);
    Ok(PenaltyEstimate { point, lo, hi, per_time, b })
}

/// Signed difference between the penalties computed against two control
/// constructions, with paired parametric draws: each iteration shares the
/// treated arm's draw across both penalties, so only control uncertainty
/// separates them.
pub fn penalty_delta(
    treated: &PenaltyPath,
    control_model: &PenaltyPath,
    control_empirical: &PenaltyPath,
    window: (i32, i32),
    b: usize,
    seed: u64,
) -> Result<AteResult> {
    if b < 2 {
        return Err(Error::Estimation(format!("{b} draws cannot form an interval")));
    }
    let tm = window_terms(treated, window, "treated")?;
    let md = window_terms(control_model, window, "model control")?;
    let ed = window_terms(control_empirical, window, "empirical control")?;
    let width = tm.len() as f64;
    let mean = |c: &[(i32, f64, f64)]| {
        tm.iter().zip(c).map(|(&(_, pm, _), &(_, pc, _))| pm - pc).sum::<f64>() / width
    };
    let point = mean(&md) - mean(&ed);

    let mut draws = Vec::with_capacity(b);
    for i in 0..b {
        let mut rng = substream_indexed(seed, "penalty-delta", i as u64);
        let mut model_total = 0.0;
        let mut emp_total = 0.0;
        for ((&(_, pm, sm), &(_, pmod, smod)), &(_, pemp, semp)) in tm.iter().zip(&md).zip(&ed) {
            let zt: f64 = rng.sample(StandardNormal);
            let zm: f64 = rng.sample(StandardNormal);
            let ze: f64 = rng.sample(StandardNormal);
            let treated_draw = pm + sm * zt;
            model_total += treated_draw - (pmod + smod * zm);
            emp_total += treated_draw - (pemp + semp * ze);
        }
        draws.push((model_total - emp_total) / width);
    }
    let (lo, hi) = percentile_ci(&draws);
    Ok(AteResult { point, lo, hi, n: tm.len(), b })
}

/// One unit offered to the matcher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchCandidate {
    pub person_id: u64,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchedPair {
    pub treated_id: u64,
    pub control_id: u64,
    pub treated_score: f64,
    pub control_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchReport {
    pub pairs: Vec<MatchedPair>,
    /// Common-support score interval: treated and control ranges intersected.
    pub support: (f64, f64),
    pub n_treated_outside: usize,
    pub n_control_outside: usize,
}

/// Logistic fit of membership on covariates by iteratively reweighted
/// least squares: capped at 50 iterations, converged when no coefficient
/// moves more than 1e-8. Covariates are standardized internally; returned
/// scores are probabilities, which standardization leaves unchanged.
pub fn propensity_scores(treated: &[MatchCandidate], control: &[MatchCandidate]) -> Result<(Vec<f64>, Vec<f64>)> {
    if treated.is_empty() || control.is_empty() {
        return Err(Error::Estimation("both groups must be non-empty".into()));
    }
    let k = treated[0].covariates.len();
    if treated.iter().chain(control).any(|c| c.covariates.len() != k) {
        return Err(Error::Estimation("covariate vectors differ in length".into()));
    }
    let n = treated.len() + control.len();
    let all: Vec<&MatchCandidate> = treated.iter().chain(control).collect();
    let y: Vec<f64> = (0..n).map(|i| if i < treated.len() { 1.0 } else { 0.0 }).collect();

    // Standardize each covariate column for a well-conditioned solve.
    let mut means = vec![0.0; k];
    let mut sds = vec![0.0; k];
    for j in 0..k {
        let mean = all.iter().map(|c| c.covariates[j]).sum::<f64>() / n as f64;
        let var = all.iter().map(|c| (c.covariates[j] - mean).powi(2)).sum::<f64>() / n as f64;
        if var < 1e-24 {
            return Err(Error::Estimation(format!("covariate {j} is constant; drop it before matching")));
        }
        means[j] = mean;
        sds[j] = var.sqrt();
    }
    let mut x = Mat::zeros(n, k + 1);
    for (i, c) in all.iter().enumerate() {
        *x.at_mut(i, 0) = 1.0;
        for j in 0..k {
            *x.at_mut(i, 1 + j) = (c.covariates[j] - means[j]) / sds[j];
        }
    }
    let labels: Vec<String> =
        std::iter::once("intercept".to_string()).chain((0..k).map(|j| format!("covariate {j}"))).collect();

    let mut beta = vec![0.0; k + 1];
    let mut converged = false;
    for _ in 0..50 {
        let eta: Vec<f64> = (0..n).map(|i| (0..=k).map(|j| x.at(i, j) * beta[j]).sum()).collect();
        let prob: Vec<f64> = eta.iter().map(|e| 1.0 / (1.0 + (-e).exp())).collect();
        // Weighted least squares on the working response.
        let mut xw = Mat::zeros(n, k + 1);
        let mut zw = vec![0.0; n];
        for i in 0..n {
            let w = (prob[i] * (1.0 - prob[i])).max(1e-10);
            let sw = w.sqrt();
            let z = eta[i] + (y[i] - prob[i]) / w;
            for j in 0..=k {
                *xw.at_mut(i, j) = sw * x.at(i, j);
            }
            zw[i] = sw * z;
        }
        let (next, _) = qr_solve(&xw, &zw, &labels)?;
        let step = next.iter().zip(&beta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        beta = next;
        if step < 1e-8 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Estimation("logistic fit did not converge within 50 iterations".into()));
    }
    let score = |c: &MatchCandidate| {
        let eta = beta[0]
            + (0..k).map(|j| beta[1 + j] * (c.covariates[j] - means[j]) / sds[j]).sum::<f64>();
        1.0 / (1.0 + (-eta).exp())
    };
    Ok((treated.iter().map(|c| score(c)).collect(), control.iter().map(|c| score(c)).collect()))
}

/// Greedy 1:1 nearest-neighbor matching on given scores without
/// replacement, restricted to common support. Treated units are matched in
/// ascending id order; score ties break toward the smaller control id.
pub fn match_on_scores(treated: &[(u64, f64)], control: &[(u64, f64)]) -> Result<MatchReport> {
    let min_max = |v: &[(u64, f64)]| {
        v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, s)| (lo.min(s), hi.max(s)))
    };
    let (t_lo, t_hi) = min_max(treated);
    let (c_lo, c_hi) = min_max(control);
    let support = (t_lo.max(c_lo), t_hi.min(c_hi));
    if support.0 > support.1 {
        return Err(Error::Estimation(format!(
            "empty common support: treated scores span [{t_lo:.6}, {t_hi:.6}], control [{c_lo:.6}, {c_hi:.6}]"
        )));
    }
    let inside = |s: f64| s >= support.0 && s <= support.1;
    let mut t_in: Vec<(u64, f64)> = treated.iter().copied().filter(|&(_, s)| inside(s)).collect();
    t_in.sort_by_key(|&(id, _)| id);
    let mut pool: Vec<(u64, f64)> = control.iter().copied().filter(|&(_, s)| inside(s)).collect();
    pool.sort_by_key(|&(id, _)| id);

    let n_treated_outside = treated.len() - t_in.len();
    let n_control_outside = control.len() - pool.len();
    let mut pairs = Vec::new();
    for (tid, tscore) in t_in {
        if pool.is_empty() {
            break;
        }
        // Ascending id order makes the first minimum the smallest-id tie.
        let best = pool
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| (a.1 - tscore).abs().total_cmp(&(b.1 - tscore).abs()))
            .map(|(i, _)| i)
            .expect("pool non-empty");
        let (cid, cscore) = pool.remove(best);
        pairs.push(MatchedPair { treated_id: tid, control_id: cid, treated_score: tscore, control_score: cscore });
    }
    Ok(MatchReport { pairs, support, n_treated_outside, n_control_outside })
}

/// Propensity-score matching: fit scores, then nearest-neighbor match on
/// them inside common support.
pub fn propensity_match(treated: &[MatchCandidate], control: &[MatchCandidate]) -> Result<MatchReport> {
    let (ts, cs) = propensity_scores(treated, control)?;
    let tag = |cands: &[MatchCandidate], scores: &[f64]| -> Vec<(u64, f64)> {
        cands.iter().zip(scores).map(|(c, &s)| (c.person_id, s)).collect()
    };
    match_on_scores(&tag(treated, &ts), &tag(control, &cs))
}
