//! Estimator guarantees: exact hand-computed means and windows, planted
//! effects recovered from synthesized records, bootstrap seed stability
//! checked against an independent resampler, event-study least squares
//! against a second solver, normalization and penalty arithmetic, and
//! matching against brute-force search.

use std::collections::BTreeMap;

use lifeseq_core::causal::{
    ate_diff_means, child_penalty, counterfactual_income, event_study_ols, local_ate_rdd, match_on_scores,
    paired_bootstrap, penalty_delta, propensity_match, propensity_scores, CausalSample, EventPanel, Group,
    MatchCandidate, OutcomeField, PanelRow, PenaltyPath,
};
use lifeseq_core::synth::{generate_population, LabourStatus, PersonWithRecords, PlantedEffects, Sex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn sample(id: u64, treated: bool, y: f64) -> CausalSample {
    CausalSample { person_id: id, treated, y_real: y, y_sim: Some(y), running: 0.0 }
}

#[test]
fn difference_in_means_is_exact_on_hand_samples() {
    let samples = vec![sample(1, true, 10.0), sample(2, true, 12.0), sample(3, false, 7.0), sample(4, false, 9.0)];
    assert_eq!(ate_diff_means(&samples, OutcomeField::Real).unwrap(), 3.0);

    let identical: Vec<CausalSample> =
        (0..6).map(|i| sample(i, i % 2 == 0, 5.5)).collect();
    assert_eq!(ate_diff_means(&identical, OutcomeField::Real).unwrap(), 0.0);

    let one_sided: Vec<CausalSample> = (0..4).map(|i| sample(i, true, 1.0)).collect();
    assert!(ate_diff_means(&one_sided, OutcomeField::Real).is_err());

    // Samples without a simulated outcome are dropped from the model arm.
    let mut with_gaps = samples.clone();
    with_gaps[0].y_sim = None;
    assert_eq!(ate_diff_means(&with_gaps, OutcomeField::Sim).unwrap(), 12.0 - 8.0);
    with_gaps[1].y_sim = None;
    assert!(ate_diff_means(&with_gaps, OutcomeField::Sim).is_err(), "a fully censored arm is an error");
}

#[test]
fn rdd_restricts_to_the_window_and_windows_nest() {
    let mk = |id: u64, a: f64, y: f64| CausalSample { person_id: id, treated: false, y_real: y, y_sim: Some(y), running: a };
    let samples = vec![
        mk(1, 462.0, 10.0),
        mk(2, 476.0, 11.0),
        mk(3, 484.0, 15.0),
        mk(4, 498.0, 17.0),
        mk(5, 300.0, 99.0), // far below every window
        mk(6, 700.0, 99.0), // far above every window
    ];
    // h=12 keeps persons 2 and 3 only; the stored treated flag is ignored.
    assert_eq!(local_ate_rdd(&samples, OutcomeField::Real, 480.0, 12.0).unwrap(), 4.0);
    // h=20 adds persons 1 and 4.
    assert_eq!(local_ate_rdd(&samples, OutcomeField::Real, 480.0, 20.0).unwrap(), 16.0 - 10.5);

    let below_only = vec![mk(1, 470.0, 1.0), mk(2, 475.0, 2.0)];
    assert!(local_ate_rdd(&below_only, OutcomeField::Real, 480.0, 15.0).is_err());

    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let random: Vec<CausalSample> =
        (0..200).map(|i| mk(i, 480.0 + rng.gen_range(-160.0..160.0), rng.gen::<f64>())).collect();
    let ids_in = |h: f64| -> Vec<u64> {
        random.iter().filter(|s| (s.running - 480.0).abs() <= h).map(|s| s.person_id).collect()
    };
    for pair in [12.0, 48.0, 96.0, 144.0].windows(2) {
        let (small, big) = (ids_in(pair[0]), ids_in(pair[1]));
        assert!(small.iter().all(|id| big.contains(id)), "window {} must nest inside {}", pair[0], pair[1]);
    }
}

fn pension_samples(persons: &[PersonWithRecords]) -> Vec<CausalSample> {
    persons
        .iter()
        .filter(|p| p.profile.sex == Sex::M && matches!(p.profile.birth_month, 1 | 12))
        .filter_map(|p| {
            let first = p.records.iter().find(|r| r.labour_status == LabourStatus::Pensioner)?;
            let months = 12 * (first.calendar_year - p.profile.birth_year) as i64
                + (first.start_month as i64 - p.profile.birth_month as i64);
            Some(CausalSample {
                person_id: p.profile.person_id,
                treated: p.profile.birth_month == 1,
                y_real: months as f64,
                y_sim: Some(months as f64),
                running: months as f64,
            })
        })
        .collect()
}

fn displacement_samples(persons: &[PersonWithRecords]) -> Vec<CausalSample> {
    persons
        .iter()
        .filter_map(|p| {
            let first = p.records.iter().find(|r| r.labour_status == LabourStatus::Mobility)?;
            let age_months = 12 * (first.calendar_year - p.profile.birth_year) as i64
                + (first.start_month as i64 - p.profile.birth_month as i64);
            let total: u32 =
                p.records.iter().filter(|r| r.labour_status == LabourStatus::Mobility).map(|r| r.duration_months).sum();
            Some(CausalSample {
                person_id: p.profile.person_id,
                treated: age_months >= 480,
                y_real: total as f64,
                y_sim: Some(total as f64),
                running: age_months as f64,
            })
        })
        .collect()
}

#[test]
fn planted_effects_are_recovered_from_synthesized_records() {
    let effects = PlantedEffects::default();
    let pop = generate_population(2000, &effects, 99).expect("synthesize");

    // January-born workers retire later by the planted shift.
    let pension = pension_samples(&pop.persons);
    assert!(pension.len() > 200, "only {} pension samples", pension.len());
    let boot = paired_bootstrap(&pension, |s, f| ate_diff_means(s, f), 400, 7).expect("bootstrap");
    let se = standard_deviation(&boot.draws_empirical);
    assert!(
        (boot.empirical.point - effects.december_retirement_shift).abs() <= 3.0 * se,
        "estimated {} months, planted {}, se {}",
        boot.empirical.point,
        effects.december_retirement_shift,
        se
    );

    // Benefit durations jump by the planted amount at the age cutoff.
    let displaced = displacement_samples(&pop.persons);
    assert!(displaced.len() > 200, "only {} displaced samples", displaced.len());
    let cutoff = effects.mobility_age_cutoff_months as f64;
    let boot = paired_bootstrap(&displaced, |s, f| local_ate_rdd(s, f, cutoff, 96.0), 400, 8).expect("bootstrap");
    let se = standard_deviation(&boot.draws_empirical);
    assert!(
        (boot.empirical.point - effects.mobility_duration_jump).abs() <= 3.0 * se,
        "estimated {} months, planted {}, se {}",
        boot.empirical.point,
        effects.mobility_duration_jump,
        se
    );

    // With identical outcome columns the arms agree resample by resample.
    assert_eq!(boot.delta.point, 0.0);
    assert!(boot.draws_delta.iter().all(|&d| d == 0.0));
}

fn standard_deviation(xs: &[f64]) -> f64 {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[test]
fn bootstrap_is_seed_stable_and_degenerates_cleanly() {
    let samples: Vec<CausalSample> = (0..40)
        .map(|i| sample(i, i % 2 == 0, (i as f64).sin() * 3.0 + if i % 2 == 0 { 2.0 } else { 0.0 }))
        .collect();
    let est = |s: &[CausalSample], f: OutcomeField| ate_diff_means(s, f);
    let a = paired_bootstrap(&samples, est, 300, 5).unwrap();
    let b = paired_bootstrap(&samples, est, 300, 5).unwrap();
    assert_eq!(a, b, "same seed must reproduce every draw and interval");
    let c = paired_bootstrap(&samples, est, 300, 6).unwrap();
    assert_ne!(a.draws_empirical, c.draws_empirical);

    assert_eq!(a.draws_empirical.len(), 300);
    for i in 0..300 {
        assert_eq!(a.draws_delta[i], a.draws_model[i] - a.draws_empirical[i]);
    }
    assert!(a.empirical.lo <= a.empirical.point && a.empirical.point <= a.empirical.hi);

    // A single resampled person makes every resample identical.
    let lone = vec![sample(1, true, 4.0), sample(2, false, 1.0)];
    let d = paired_bootstrap(&lone, est, 50, 1).unwrap();
    assert_eq!((d.empirical.lo, d.empirical.hi), (3.0, 3.0));

    assert!(paired_bootstrap(&samples, est, 1, 0).is_err(), "one resample cannot form an interval");
}

#[test]
fn bootstrap_draw_distribution_matches_an_independent_resampler() {
    let mut rng = ChaCha12Rng::seed_from_u64(21);
    let samples: Vec<CausalSample> = (0..100)
        .map(|i| {
            let treated = i % 2 == 0;
            let y = if treated { 5.0 } else { 0.0 } + rng.gen_range(-3.0..3.0);
            sample(i, treated, y)
        })
        .collect();
    let b = 200usize;
    let mine = paired_bootstrap(&samples, |s, f| ate_diff_means(s, f), b, 31).unwrap();

    // Plain sequential resampler, written independently of the library's
    // seeding scheme.
    let mut oracle = Vec::with_capacity(b);
    let mut orng = ChaCha12Rng::seed_from_u64(97);
    for _ in 0..b {
        let resample: Vec<CausalSample> = (0..samples.len()).map(|_| samples[orng.gen_range(0..samples.len())].clone()).collect();
        oracle.push(ate_diff_means(&resample, OutcomeField::Real).unwrap());
    }

    // Two-sample Kolmogorov-Smirnov distance with alpha = 0.01.
    let mut xs = mine.draws_empirical.clone();
    let mut ys = oracle;
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let mut d_max: f64 = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    while i < xs.len() && j < ys.len() {
        if xs[i] <= ys[j] {
            i += 1;
        } else {
            j += 1;
        }
        let d = (i as f64 / xs.len() as f64 - j as f64 / ys.len() as f64).abs();
        d_max = d_max.max(d);
    }
    let critical = 1.628 * ((xs.len() + ys.len()) as f64 / (xs.len() * ys.len()) as f64).sqrt();
    assert!(d_max < critical, "KS distance {d_max} exceeds the 1% critical value {critical}");
}

fn row(person_id: u64, year: i32, event_time: i32, outcome: f64, age: i32, group: Group) -> PanelRow {
    PanelRow { person_id, year, event_time, outcome, age, group }
}

#[test]
fn event_study_on_a_tiny_panel_equals_the_difference_of_period_means() {
    // Three persons, two periods, no age or year variation: the event
    // coefficient is the difference of period means and the intercept is
    // the reference-period mean.
    let rows = vec![
        row(1, 2000, -1, 10.0, 30, Group::M),
        row(1, 2000, 0, 7.0, 30, Group::M),
        row(2, 2000, -1, 12.0, 30, Group::M),
        row(2, 2000, 0, 8.0, 30, Group::M),
        row(3, 2000, -1, 11.0, 30, Group::M),
        row(3, 2000, 0, 9.0, 30, Group::M),
    ];
    let panel = EventPanel { rows };
    let fit = event_study_ols(&panel, Group::M).expect("fit");
    assert!((fit.intercept.estimate - 11.0).abs() < 1e-12);
    assert!((fit.alpha[&0].estimate - (8.0 - 11.0)).abs() < 1e-12);
    assert!(fit.beta_age.is_empty() && fit.gamma_year.is_empty(), "constant blocks contribute no dummies");

    // Shifting every outcome moves only the intercept.
    let shifted = EventPanel {
        rows: panel.rows.iter().map(|r| PanelRow { outcome: r.outcome + 100.0, ..r.clone() }).collect(),
    };
    let fit2 = event_study_ols(&shifted, Group::M).expect("fit");
    assert!((fit2.alpha[&0].estimate - fit.alpha[&0].estimate).abs() < 1e-10);
    assert!((fit2.intercept.estimate - fit.intercept.estimate - 100.0).abs() < 1e-10);
}

/// Random panel with real age and year variation, every person observed at
/// the reference period.
fn random_panel(n_persons: u64, seed: u64) -> EventPanel {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for pid in 0..n_persons {
        let event_year = rng.gen_range(1998..=2005);
        let birth_year = rng.gen_range(1958..=1970);
        for t in -3..=4 {
            if t != -1 && rng.gen_bool(0.15) {
                continue; // unbalanced panel
            }
            let year = event_year + t;
            let age = year - birth_year;
            let outcome = 1200.0 + 8.0 * (age as f64) + 15.0 * ((year - 2000) as f64)
                + if t >= 0 { -60.0 * (1.0 - t as f64 / 10.0) } else { 0.0 }
                + rng.gen_range(-20.0..20.0);
            rows.push(row(pid, year, t, outcome, age, Group::M));
        }
    }
    EventPanel { rows }
}

#[test]
fn event_study_matches_an_independent_least_squares_solver() {
    let panel = random_panel(40, 3);
    let fit = event_study_ols(&panel, Group::M).expect("fit");

    // Rebuild the same design and solve it with a second implementation.
    use nalgebra::{DMatrix, DVector};
    let rows: Vec<&PanelRow> = panel.rows.iter().collect();
    let times: Vec<i32> = {
        let mut v: Vec<i32> = rows.iter().map(|r| r.event_time).filter(|&t| t != -1).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let ages: Vec<i32> = {
        let mut v: Vec<i32> = rows.iter().map(|r| r.age).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let years: Vec<i32> = {
        let mut v: Vec<i32> = rows.iter().map(|r| r.year).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let p = 1 + times.len() + (ages.len() - 1) + (years.len() - 1);
    let n = rows.len();
    let mut x = DMatrix::<f64>::zeros(n, p);
    let mut y = DVector::<f64>::zeros(n);
    for (i, r) in rows.iter().enumerate() {
        x[(i, 0)] = 1.0;
        if let Ok(j) = times.binary_search(&r.event_time) {
            x[(i, 1 + j)] = 1.0;
        }
        if let Ok(j) = ages[1..].binary_search(&r.age) {
            x[(i, 1 + times.len() + j)] = 1.0;
        }
        if let Ok(j) = years[1..].binary_search(&r.year) {
            x[(i, 1 + times.len() + ages.len() - 1 + j)] = 1.0;
        }
        y[i] = r.outcome;
    }
    let xt = x.transpose();
    let xtx = &xt * &x;
    let beta = xtx.clone().try_inverse().expect("full rank") * &xt * &y;

    for (j, &t) in times.iter().enumerate() {
        assert!(
            (fit.alpha[&t].estimate - beta[1 + j]).abs() < 1e-8,
            "event time {t}: {} vs {}",
            fit.alpha[&t].estimate,
            beta[1 + j]
        );
    }
    for (j, &k) in ages[1..].iter().enumerate() {
        assert!((fit.beta_age[&k].estimate - beta[1 + times.len() + j]).abs() < 1e-8);
    }
    for (j, &yv) in years[1..].iter().enumerate() {
        assert!((fit.gamma_year[&yv].estimate - beta[1 + times.len() + ages.len() - 1 + j]).abs() < 1e-8);
    }
    assert!((fit.intercept.estimate - beta[0]).abs() < 1e-8);

    // Robust errors against the sandwich formula computed the direct way.
    let resid = &y - &x * &beta;
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for i in 0..n {
        let xi = x.row(i).transpose();
        meat += resid[i] * resid[i] * &xi * xi.transpose();
    }
    let bread = xtx.try_inverse().expect("full rank");
    let cov = (n as f64 / (n - p) as f64) * &bread * meat * &bread;
    for (j, &t) in times.iter().enumerate() {
        assert!(
            (fit.alpha[&t].se - cov[(1 + j, 1 + j)].sqrt()).abs() < 1e-8,
            "se at event time {t}: {} vs {}",
            fit.alpha[&t].se,
            cov[(1 + j, 1 + j)].sqrt()
        );
    }
}

#[test]
fn event_study_rejects_degenerate_panels() {
    // Age is a bijection of year, so the dummy blocks are collinear.
    let mut rows = Vec::new();
    for pid in 0..8u64 {
        for t in [-1, 0] {
            let year = 2000 + pid as i32 % 3;
            rows.push(row(pid, year, t, 1.0 + t as f64 + pid as f64, year - 1960, Group::M));
        }
    }
    let err = event_study_ols(&EventPanel { rows }, Group::M).unwrap_err();
    assert!(err.to_string().contains("rank deficient"), "unexpected error: {err}");

    // A person without the reference period is rejected by name.
    let rows = vec![
        row(1, 2000, -1, 1.0, 40, Group::M),
        row(1, 2001, 0, 2.0, 41, Group::M),
        row(2, 2001, 0, 3.0, 41, Group::M),
    ];
    let err = event_study_ols(&EventPanel { rows }, Group::M).unwrap_err();
    assert!(err.to_string().contains("person 2"), "unexpected error: {err}");

    // Group filtering is strict: an all-control panel has no treated rows.
    let rows = vec![row(1, 2000, -1, 1.0, 40, Group::Nm)];
    assert!(event_study_ols(&EventPanel { rows }, Group::M).is_err());
}

#[test]
fn counterfactual_normalization_is_scale_invariant_and_zero_for_null_effects() {
    let panel = random_panel(30, 9);
    let fit = event_study_ols(&panel, Group::M).expect("fit");
    let cf = counterfactual_income(&fit, &panel, Group::M).expect("counterfactual");
    assert_eq!(cf.y_tilde.len(), panel.rows.len());
    assert_eq!(cf.path.p[&-1], 0.0, "the reference period has no event coefficient");
    assert_eq!(cf.path.sigma[&-1], 0.0);

    // Doubling outcomes doubles both numerator and denominator.
    let doubled = EventPanel {
        rows: panel.rows.iter().map(|r| PanelRow { outcome: 2.0 * r.outcome, ..r.clone() }).collect(),
    };
    let fit2 = event_study_ols(&doubled, Group::M).expect("fit");
    let cf2 = counterfactual_income(&fit2, &doubled, Group::M).expect("counterfactual");
    for (t, p) in &cf.path.p {
        assert!((cf2.path.p[t] - p).abs() < 1e-9, "event time {t}: {} vs {}", cf2.path.p[t], p);
    }

    // A panel whose outcomes carry no event structure has near-zero effects.
    let mut rng = ChaCha12Rng::seed_from_u64(12);
    let flat = EventPanel {
        rows: panel
            .rows
            .iter()
            .map(|r| PanelRow { outcome: 900.0 + 5.0 * r.age as f64 + rng.gen_range(-1e-6..1e-6), ..r.clone() })
            .collect(),
    };
    let fit3 = event_study_ols(&flat, Group::M).expect("fit");
    let cf3 = counterfactual_income(&fit3, &flat, Group::M).expect("counterfactual");
    for (t, p) in &cf3.path.p {
        assert!(p.abs() < 1e-6, "event time {t} has spurious effect {p}");
    }

    // Negative outcomes push the counterfactual mean below zero.
    let negative = EventPanel {
        rows: panel.rows.iter().map(|r| PanelRow { outcome: r.outcome - 1e6, ..r.clone() }).collect(),
    };
    let fit4 = event_study_ols(&negative, Group::M).expect("fit");
    assert!(counterfactual_income(&fit4, &negative, Group::M).is_err());
}

fn path(entries: &[(i32, f64, f64)]) -> PenaltyPath {
    PenaltyPath {
        p: entries.iter().map(|&(t, p, _)| (t, p)).collect(),
        sigma: entries.iter().map(|&(t, _, s)| (t, s)).collect(),
    }
}

#[test]
fn child_penalty_window_arithmetic_and_bootstrap_degeneracy() {
    let m = path(&[(-1, 0.0, 0.0), (0, -0.30, 0.0), (1, -0.20, 0.0), (2, -0.10, 0.0)]);
    let nm = path(&[(-1, 0.0, 0.0), (0, -0.05, 0.0), (1, -0.05, 0.0), (2, -0.05, 0.0)]);

    // Zero standard errors collapse the interval onto the point.
    let est = child_penalty(&m, &nm, (0, 2), 200, 3).expect("penalty");
    let want = ((-0.25) + (-0.15) + (-0.05)) / 3.0;
    assert!((est.point - want).abs() < 1e-15);
    assert_eq!((est.lo, est.hi), (est.point, est.point));
    assert_eq!(est.per_time[&0], -0.25);

    // A single-period window is that period's difference.
    let single = child_penalty(&m, &nm, (0, 0), 50, 3).expect("penalty");
    assert_eq!(single.point, -0.25);

    // Swapping the arms negates the point estimate exactly.
    let swapped = child_penalty(&nm, &m, (0, 2), 200, 3).expect("penalty");
    assert_eq!(swapped.point, -est.point);

    // Event times missing from an arm are refused.
    assert!(child_penalty(&m, &nm, (0, 5), 50, 3).is_err());
    assert!(child_penalty(&m, &nm, (2, 0), 50, 3).is_err(), "inverted window");
    assert!(child_penalty(&m, &nm, (0, 2), 1, 3).is_err(), "one draw cannot form an interval");

    // With noise the interval brackets the point and is seed stable.
    let m = path(&[(0, -0.30, 0.04), (1, -0.20, 0.03)]);
    let nm = path(&[(0, -0.05, 0.02), (1, -0.05, 0.02)]);
    let a = child_penalty(&m, &nm, (0, 1), 500, 11).expect("penalty");
    let b = child_penalty(&m, &nm, (0, 1), 500, 11).expect("penalty");
    assert_eq!(a, b);
    assert!(a.lo < a.point && a.point < a.hi);
    assert!(a.lo > a.point - 4.0 * 0.05 && a.hi < a.point + 4.0 * 0.05, "interval far wider than the noise");
}

#[test]
fn penalty_delta_cancels_the_shared_treated_draws() {
    let treated = path(&[(0, -0.30, 0.10), (1, -0.20, 0.10)]);
    let control = path(&[(0, -0.05, 0.0), (1, -0.04, 0.0)]);

    // Identical controls with zero noise: the treated arm's draws are
    // shared, so every paired difference is exactly zero.
    let d = penalty_delta(&treated, &control, &control, (0, 1), 300, 17).expect("delta");
    assert_eq!((d.point, d.lo, d.hi), (0.0, 0.0, 0.0));

    // Distinct controls shift the point by the control gap. With zero
    // control noise every draw equals the point up to summation-order
    // rounding, so the interval collapses onto it.
    let worse = path(&[(0, -0.10, 0.0), (1, -0.09, 0.0)]);
    let d = penalty_delta(&treated, &worse, &control, (0, 1), 300, 17).expect("delta");
    assert!((d.point - 0.05).abs() < 1e-12, "model control is 0.05 less negative on average");
    assert!((d.lo - d.point).abs() < 1e-12 && (d.hi - d.point).abs() < 1e-12);
}

#[test]
fn matching_agrees_with_brute_force_and_respects_support() {
    let mut rng = ChaCha12Rng::seed_from_u64(30);
    let mothers: Vec<MatchCandidate> = (0..30)
        .map(|i| MatchCandidate {
            person_id: 1000 + i,
            covariates: vec![rng.gen_range(1958.0..1972.0), rng.gen_range(1.0..6.0)],
        })
        .collect();
    let controls: Vec<MatchCandidate> = (0..60)
        .map(|i| MatchCandidate {
            person_id: 2000 + i,
            covariates: vec![rng.gen_range(1958.0..1972.0), rng.gen_range(1.0..6.0)],
        })
        .collect();

    let report = propensity_match(&mothers, &controls).expect("match");
    assert!(report.pairs.len() <= mothers.len());
    let (lo, hi) = report.support;
    for pair in &report.pairs {
        assert!(pair.treated_score >= lo && pair.treated_score <= hi);
        assert!(pair.control_score >= lo && pair.control_score <= hi);
    }
    let mut used: Vec<u64> = report.pairs.iter().map(|p| p.control_id).collect();
    used.sort_unstable();
    let before = used.len();
    used.dedup();
    assert_eq!(before, used.len(), "matching is without replacement");

    // Brute force: recompute scores, then replay the greedy rule directly.
    let (ts, cs) = propensity_scores(&mothers, &controls).expect("scores");
    let t_lo = ts.iter().copied().fold(f64::INFINITY, f64::min).max(cs.iter().copied().fold(f64::INFINITY, f64::min));
    let t_hi =
        ts.iter().copied().fold(f64::NEG_INFINITY, f64::max).min(cs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let mut remaining: Vec<(u64, f64)> = controls
        .iter()
        .zip(&cs)
        .filter(|(_, &s)| s >= t_lo && s <= t_hi)
        .map(|(c, &s)| (c.person_id, s))
        .collect();
    let mut ordered: Vec<(u64, f64)> = mothers
        .iter()
        .zip(&ts)
        .filter(|(_, &s)| s >= t_lo && s <= t_hi)
        .map(|(c, &s)| (c.person_id, s))
        .collect();
    ordered.sort_by_key(|&(id, _)| id);
    let mut expected = Vec::new();
    for (mid, ms) in ordered {
        if remaining.is_empty() {
            break;
        }
        let mut best = 0usize;
        for i in 1..remaining.len() {
            let (bd, cd) = ((remaining[best].1 - ms).abs(), (remaining[i].1 - ms).abs());
            if cd < bd || (cd == bd && remaining[i].0 < remaining[best].0) {
                best = i;
            }
        }
        let (cid, _) = remaining.remove(best);
        expected.push((mid, cid));
    }
    let got: Vec<(u64, u64)> = report.pairs.iter().map(|p| (p.treated_id, p.control_id)).collect();
    assert_eq!(got, expected, "greedy matching must agree with the brute-force replay");
}

#[test]
fn exact_covariate_twins_are_matched_and_ties_prefer_the_smaller_id() {
    // One treated unit has two exact covariate twins in the control pool,
    // embedded in enough overlapping filler for the logistic fit to converge.
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let mut mothers = vec![MatchCandidate { person_id: 5, covariates: vec![1964.0, 3.0] }];
    let mut controls = vec![
        MatchCandidate { person_id: 40, covariates: vec![1964.0, 3.0] },
        MatchCandidate { person_id: 20, covariates: vec![1964.0, 3.0] },
    ];
    for i in 0..20 {
        mothers.push(MatchCandidate {
            person_id: 100 + i,
            covariates: vec![rng.gen_range(1958.0..1972.0), rng.gen_range(1.0..6.0)],
        });
    }
    for i in 0..40 {
        controls.push(MatchCandidate {
            person_id: 2000 + i,
            covariates: vec![rng.gen_range(1958.0..1972.0), rng.gen_range(1.0..6.0)],
        });
    }
    let report = propensity_match(&mothers, &controls).expect("match");

    // Identical covariates give bitwise identical scores, so person 5 (the
    // first treated unit matched) sits at distance zero from both twins and
    // the tie breaks toward the smaller control id.
    let first = &report.pairs[0];
    assert_eq!(first.treated_id, 5);
    assert_eq!(first.control_id, 20, "equal scores break toward the smaller id");
    assert_eq!(first.treated_score, first.control_score);
}

#[test]
fn score_space_matching_reports_empty_support() {
    let treated: Vec<(u64, f64)> = vec![(1, 0.8), (2, 0.9)];
    let control: Vec<(u64, f64)> = vec![(3, 0.1), (4, 0.2)];
    let err = match_on_scores(&treated, &control).unwrap_err();
    assert!(err.to_string().contains("common support"), "unexpected error: {err}");

    // One overlapping unit is enough to proceed.
    let control = vec![(3, 0.1), (4, 0.85)];
    let report = match_on_scores(&treated, &control).expect("match");
    assert_eq!(report.pairs.len(), 1, "only the overlapping region is matchable");
    assert_eq!(report.n_control_outside, 1);

    // Exact score ties break toward the smaller control id.
    let treated = vec![(9, 0.5)];
    let control = vec![(40, 0.5), (20, 0.5), (10, 0.4)];
    let report = match_on_scores(&treated, &control).expect("match");
    assert_eq!(report.pairs[0].control_id, 20);
    assert_eq!(report.n_control_outside, 1);
}

#[test]
fn logistic_fit_satisfies_its_score_equations_and_detects_separation() {
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    // Overlapping groups: treatment leans on the first covariate.
    let treated: Vec<MatchCandidate> = (0..80)
        .map(|i| MatchCandidate { person_id: i, covariates: vec![rng.gen_range(0.0..3.0), rng.gen_range(-1.0..1.0)] })
        .collect();
    let control: Vec<MatchCandidate> = (0..120)
        .map(|i| MatchCandidate {
            person_id: 500 + i,
            covariates: vec![rng.gen_range(-3.0..1.5), rng.gen_range(-1.0..1.0)],
        })
        .collect();
    let (ts, cs) = propensity_scores(&treated, &control).expect("fit");
    for s in ts.iter().chain(&cs) {
        assert!(*s > 0.0 && *s < 1.0);
    }
    // First-order conditions of the logistic likelihood at the optimum.
    let resid_sum: f64 = ts.iter().map(|p| 1.0 - p).sum::<f64>() + cs.iter().map(|p| -p).sum::<f64>();
    assert!(resid_sum.abs() < 1e-6, "intercept score equation violated: {resid_sum}");
    for j in 0..2 {
        let g: f64 = treated.iter().zip(&ts).map(|(c, p)| c.covariates[j] * (1.0 - p)).sum::<f64>()
            + control.iter().zip(&cs).map(|(c, p)| c.covariates[j] * (-p)).sum::<f64>();
        assert!(g.abs() < 1e-5, "covariate {j} score equation violated: {g}");
    }

    // Perfect separation cannot converge and is reported as such.
    let sep_t: Vec<MatchCandidate> =
        (0..20).map(|i| MatchCandidate { person_id: i, covariates: vec![10.0 + i as f64, 0.0] }).collect();
    let sep_c: Vec<MatchCandidate> =
        (0..20).map(|i| MatchCandidate { person_id: 100 + i, covariates: vec![-10.0 - i as f64, 1.0] }).collect();
    let err = propensity_scores(&sep_t, &sep_c).unwrap_err();
    assert!(err.to_string().contains("converge"), "unexpected error: {err}");

    // A constant covariate is named instead of silently dropped.
    let const_t: Vec<MatchCandidate> =
        (0..5).map(|i| MatchCandidate { person_id: i, covariates: vec![1.0, i as f64] }).collect();
    let const_c: Vec<MatchCandidate> =
        (0..5).map(|i| MatchCandidate { person_id: 50 + i, covariates: vec![1.0, 5.0 + i as f64] }).collect();
    let err = propensity_scores(&const_t, &const_c).unwrap_err();
    assert!(err.to_string().contains("covariate 0"), "unexpected error: {err}");
}

#[test]
fn paired_estimates_expose_divergence_between_arms() {
    // The model arm overstates every outcome by 2: delta must say so.
    let samples: Vec<CausalSample> = (0..50)
        .map(|i| {
            let treated = i % 2 == 0;
            let y = if treated { 10.0 } else { 6.0 } + (i as f64 * 0.701).sin();
            CausalSample { person_id: i, treated, y_real: y, y_sim: Some(y + if treated { 2.0 } else { 0.0 }), running: 0.0 }
        })
        .collect();
    let boot = paired_bootstrap(&samples, |s, f| ate_diff_means(s, f), 500, 13).unwrap();
    assert!((boot.delta.point - 2.0).abs() < 1e-9);
    assert!(boot.delta.lo <= boot.delta.point && boot.delta.point <= boot.delta.hi);
    assert!(boot.delta.hi - boot.delta.lo < 0.5, "treated-only shift is nearly deterministic under pairing");

    let table: BTreeMap<&str, f64> =
        [("emp", boot.empirical.point), ("model", boot.model.point), ("delta", boot.delta.point)].into();
    assert!((table["model"] - table["emp"] - table["delta"]).abs() < 1e-12);
}
