//! Synthetic-population tests: determinism, record validity, direct recovery
//! of every planted effect from the raw tables, and sample selection.

use std::collections::BTreeSet;

use lifeseq_core::synth::{
    age_in_months, apply_sample_selection, default_deflator, generate_population, read_population_jsonl,
    write_population_jsonl, LabourStatus, PartFull, PersonProfile, PersonWithRecords, PlantedEffects, Population,
    Sex, TabularRecord, OBSERVATION_END, OBSERVATION_START, SELECTION_CRITERIA,
};

fn pop(n: usize, seed: u64) -> Population {
    generate_population(n, &PlantedEffects::default(), seed).expect("synthesize")
}

#[test]
fn generation_is_deterministic_in_the_seed() {
    let a = pop(150, 7);
    let b = pop(150, 7);
    let dir = tempfile::tempdir().expect("tempdir");
    let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_population_jsonl(&a, &pa).expect("write");
    write_population_jsonl(&b, &pb).expect("write");
    assert_eq!(std::fs::read(&pa).expect("read"), std::fs::read(&pb).expect("read"), "same seed, same bytes");

    let c = pop(150, 8);
    let pc = dir.path().join("c.jsonl");
    write_population_jsonl(&c, &pc).expect("write");
    assert_ne!(std::fs::read(&pa).expect("read"), std::fs::read(&pc).expect("read"), "different seed");

    let back = read_population_jsonl(&pa).expect("read back");
    assert_eq!(back.persons.len(), a.persons.len());
    assert_eq!(back.persons[3].records, a.persons[3].records);
}

#[test]
fn prefix_of_a_larger_population_is_stable() {
    let small = pop(40, 11);
    let large = pop(120, 11);
    for (s, l) in small.persons.iter().zip(&large.persons) {
        assert_eq!(s.profile, l.profile);
        assert_eq!(s.records, l.records);
    }
}

#[test]
fn every_record_respects_the_window_and_ordering() {
    let p = pop(600, 21);
    for person in &p.persons {
        assert!(!person.records.is_empty());
        for r in &person.records {
            assert_eq!(r.person_id, person.profile.person_id);
            assert!((OBSERVATION_START..=OBSERVATION_END).contains(&r.calendar_year), "year {}", r.calendar_year);
            assert!((1..=12).contains(&r.start_month));
            assert!((1..=12).contains(&r.duration_months));
            assert!(r.start_month + r.duration_months - 1 <= 12, "spell crosses the year boundary");
            assert!(r.yearly_income >= 0.0 && r.yearly_income.is_finite());
            if r.labour_status == LabourStatus::Employee {
                assert!(r.work_title.is_some() && r.sector.is_some() && r.part_full.is_some());
                assert_eq!(r.maternity_intensity.is_some(), person.profile.sex == Sex::F);
            }
        }
        let keys: Vec<(i32, u32)> = person.records.iter().map(|r| (r.calendar_year, r.start_month)).collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted, "records sorted by (year, month)");
    }
}

/// Total months spent in consecutive mobility-benefit records.
fn benefit_spell(person: &PersonWithRecords) -> Option<(i64, u32)> {
    let first = person.records.iter().find(|r| r.labour_status == LabourStatus::Mobility)?;
    let age = age_in_months(person.profile.birth_year, person.profile.birth_month, first.calendar_year, first.start_month);
    let months: u32 = person
        .records
        .iter()
        .filter(|r| r.labour_status == LabourStatus::Mobility)
        .map(|r| r.duration_months)
        .sum();
    Some((age, months))
}

/// The benefit-duration jump at the age cutoff must come back from the raw
/// tables: compare mean spell length just above and just below 480 months.
#[test]
fn displaced_benefit_duration_jumps_at_the_age_cutoff() {
    let effects = PlantedEffects::default();
    let p = generate_population(3000, &effects, 31).expect("synthesize");
    let cutoff = effects.mobility_age_cutoff_months;
    let (mut below, mut above) = (Vec::new(), Vec::new());
    for person in &p.persons {
        if let Some((age, months)) = benefit_spell(person) {
            if (cutoff - 24..cutoff).contains(&age) {
                below.push(months as f64);
            } else if (cutoff..cutoff + 24).contains(&age) {
                above.push(months as f64);
            }
        }
    }
    assert!(below.len() > 30 && above.len() > 30, "windows too thin: {} / {}", below.len(), above.len());
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mb, ma) = (mean(&below), mean(&above));
    let jump = ma - mb;
    assert!(
        (jump - effects.mobility_duration_jump).abs() < 1.0,
        "planted jump {} recovered as {jump:.2} ({mb:.2} below, {ma:.2} above)",
        effects.mobility_duration_jump
    );
    assert!((mb - 8.0).abs() < 1.0, "baseline duration about 8 months, got {mb:.2}");
}

/// January-born men in the pension cohort retire about seven months later.
#[test]
fn retirement_age_shifts_for_january_born() {
    let effects = PlantedEffects::default();
    let p = generate_population(3000, &effects, 32).expect("synthesize");
    let (mut jan, mut dec) = (Vec::new(), Vec::new());
    for person in &p.persons {
        let first_pension = person.records.iter().find(|r| r.labour_status == LabourStatus::Pensioner);
        let r = match first_pension {
            Some(r) => r,
            None => continue,
        };
        let age = age_in_months(person.profile.birth_year, person.profile.birth_month, r.calendar_year, r.start_month) as f64;
        match person.profile.birth_month {
            1 => jan.push(age),
            12 => dec.push(age),
            _ => {}
        }
    }
    assert!(jan.len() > 100 && dec.len() > 100, "thin cohorts: {} / {}", jan.len(), dec.len());
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let shift = mean(&jan) - mean(&dec);
    assert!(
        (shift - effects.december_retirement_shift).abs() < 2.0,
        "planted shift {} recovered as {shift:.2}",
        effects.december_retirement_shift
    );
    assert!((mean(&dec) - 744.0).abs() < 3.0, "baseline retirement near 62 years, got {:.1} months", mean(&dec));
}

fn real_monthly_wage(r: &TabularRecord) -> f64 {
    r.yearly_income / r.duration_months as f64 / default_deflator(r.calendar_year)
}

/// Mothers' real monthly income drops by exactly the planted fraction in the
/// birth year (the job wage is fixed, so the ratio is deterministic), and
/// recovers within the configured horizon. Childless women show no dip.
#[test]
fn maternity_income_dip_and_recovery() {
    let effects = PlantedEffects::default();
    let p = generate_population(2000, &effects, 33).expect("synthesize");
    let mut mothers = 0;
    let mut childless = 0;
    for person in &p.persons {
        if person.profile.sex != Sex::F {
            continue;
        }
        let birth_event: Vec<&TabularRecord> = person
            .records
            .iter()
            .filter(|r| r.maternity_intensity.map_or(false, |x| x > 0.0))
            .collect();
        let employee_years: Vec<&TabularRecord> =
            person.records.iter().filter(|r| r.labour_status == LabourStatus::Employee).collect();
        if employee_years.len() < person.records.len() || employee_years.len() < 8 {
            continue; // other cohorts; the women's cohorts are all-employee
        }
        let wage_in = |year: i32| -> Option<f64> {
            employee_years.iter().find(|r| r.calendar_year == year).map(|r| real_monthly_wage(r))
        };
        match birth_event.as_slice() {
            [b] => {
                mothers += 1;
                let y = b.calendar_year;
                let (before, at) = (wage_in(y - 1), wage_in(y));
                if let (Some(w0), Some(w1)) = (before, at) {
                    let ratio = w1 / w0;
                    assert!(
                        (ratio - (1.0 - effects.maternity_income_drop)).abs() < 1e-9,
                        "person {}: dip ratio {ratio}",
                        person.profile.person_id
                    );
                }
                // recovered fully H years after the birth
                if let (Some(w0), Some(wh)) = (wage_in(y - 1), wage_in(y + effects.maternity_recovery_years as i32)) {
                    assert!((wh / w0 - 1.0).abs() < 1e-9, "full recovery after the horizon");
                }
                assert!(b.work_intensity.expect("employee") < 2.0, "reduced work intensity in the birth year");
            }
            [] => {
                childless += 1;
                // flat only while the job stays the same; other cohorts in
                // this branch may switch employers
                let job_key = |r: &TabularRecord| {
                    (r.work_title, r.work_province, r.sector.clone(), r.firm_size, r.part_full)
                };
                for w in employee_years.windows(2) {
                    if w[1].calendar_year == w[0].calendar_year + 1 && job_key(w[0]) == job_key(w[1]) {
                        let (a, b) = (real_monthly_wage(w[0]), real_monthly_wage(w[1]));
                        assert!((b / a - 1.0).abs() < 1e-9, "same-job wages are flat in real terms");
                    }
                }
            }
            more => panic!("{} maternity events for person {}", more.len(), person.profile.person_id),
        }
    }
    assert!(mothers > 100, "only {mothers} mothers");
    assert!(childless > 100, "only {childless} childless women");
}

#[test]
fn selection_keeps_complete_plausible_histories() {
    let p = pop(800, 41);
    let (kept, report) = apply_sample_selection(&p, OBSERVATION_END);
    assert_eq!(report.initial, 800);
    assert_eq!(report.retained, kept.persons.len());
    assert!(report.retained > 500, "most persons survive, got {}", report.retained);
    assert!(report.retained < 800, "the discard cohort must be caught");
    // every kept person satisfies the headline criteria
    for person in &kept.persons {
        let last = person.records.iter().map(|r| r.calendar_year).max().expect("records");
        assert_eq!(last, OBSERVATION_END);
        assert!(person.records.len() >= 5);
    }
    // selection is idempotent
    let (again, report2) = apply_sample_selection(&kept, OBSERVATION_END);
    assert_eq!(again.persons.len(), kept.persons.len());
    assert_eq!(report2.dropped_by_criterion, [0, 0, 0, 0, 0, 0]);
    assert_eq!(SELECTION_CRITERIA.len(), 6);
}

fn one_person(profile: PersonProfile, records: Vec<TabularRecord>) -> Population {
    Population { persons: vec![PersonWithRecords { profile, records }] }
}

fn simple_record(person_id: u64, year: i32) -> TabularRecord {
    TabularRecord {
        person_id,
        calendar_year: year,
        start_month: 1,
        duration_months: 12,
        labour_status: LabourStatus::Employee,
        yearly_income: 12_000.0,
        work_title: Some(2),
        work_province: Some(27),
        sector: Some("A123".into()),
        firm_size: Some(2),
        part_full: Some(PartFull::Full),
        work_intensity: Some(3.0),
        sick_intensity: Some(0.0),
        maternity_intensity: None,
    }
}

#[test]
fn each_selection_criterion_fires_on_its_own_example() {
    let profile = |id: u64, by: i32| PersonProfile { person_id: id, sex: Sex::M, birth_year: by, birth_month: 6, birth_area: 2 };

    // born 1950, observed only 2013..=2015: passes the end-year rule but has
    // 3 of 26 potential years and too few records
    let sparse = one_person(profile(1, 1950), (2013..=2015).map(|y| simple_record(1, y)).collect());
    let (kept, rep) = apply_sample_selection(&sparse, OBSERVATION_END);
    assert_eq!(kept.persons.len(), 0);
    assert_eq!(rep.dropped_by_criterion[0], 0, "ends in the final year");
    assert_eq!(rep.dropped_by_criterion[1], 1, "participation below half");
    assert_eq!(rep.dropped_by_criterion[3], 1, "fewer than 5 records");

    // stops before the corpus end
    let censored = one_person(profile(2, 1950), (1995..=2010).map(|y| simple_record(2, y)).collect());
    let (kept, rep) = apply_sample_selection(&censored, OBSERVATION_END);
    assert_eq!(kept.persons.len(), 0);
    assert_eq!(rep.dropped_by_criterion[0], 1);

    // first record at age 82
    let late = one_person(profile(3, 1925), (2007..=2015).map(|y| simple_record(3, y)).collect());
    let (kept, rep) = apply_sample_selection(&late, OBSERVATION_END);
    assert_eq!(kept.persons.len(), 0);
    assert_eq!(rep.dropped_by_criterion[4], 1);

    // first record at age 13
    let early = one_person(profile(4, 1978), (1991..=2015).map(|y| simple_record(4, y)).collect());
    let (kept, rep) = apply_sample_selection(&early, OBSERVATION_END);
    assert_eq!(kept.persons.len(), 0);
    assert_eq!(rep.dropped_by_criterion[4], 1);

    // rentier in 24 of 26 years
    let mut recs: Vec<TabularRecord> = (1990..=2015)
        .map(|y| {
            let mut r = simple_record(5, y);
            if y > 1991 {
                r.labour_status = LabourStatus::Rentier;
                r.work_title = None;
                r.work_province = None;
                r.sector = None;
                r.firm_size = None;
                r.part_full = None;
                r.work_intensity = None;
                r.sick_intensity = None;
            }
            r
        })
        .collect();
    recs.sort_by_key(|r| (r.calendar_year, r.start_month));
    let rentier = one_person(profile(5, 1955), recs);
    let (kept, rep) = apply_sample_selection(&rentier, OBSERVATION_END);
    assert_eq!(kept.persons.len(), 0);
    assert_eq!(rep.dropped_by_criterion[5], 1);

    // a plain full career passes everything
    let fine = one_person(profile(6, 1955), (1990..=2015).map(|y| simple_record(6, y)).collect());
    let (kept, rep) = apply_sample_selection(&fine, OBSERVATION_END);
    assert_eq!(kept.persons.len(), 1);
    assert_eq!(rep.dropped_by_criterion, [0, 0, 0, 0, 0, 0]);
}

#[test]
fn cohorts_cover_the_intended_patterns() {
    let p = pop(2000, 51);
    let has = |f: &dyn Fn(&PersonWithRecords) -> bool| p.persons.iter().filter(|q| f(q)).count();
    let mobility = has(&|q| q.records.iter().any(|r| r.labour_status == LabourStatus::Mobility));
    let pension = has(&|q| q.records.iter().any(|r| r.labour_status == LabourStatus::Pensioner));
    let mothers = has(&|q| q.records.iter().any(|r| r.maternity_intensity.map_or(false, |x| x > 0.0)));
    let self_emp = has(&|q| q.records.iter().any(|r| r.labour_status == LabourStatus::SelfEmployed));
    assert!(mobility > 2000 / 10, "mobility {mobility}");
    assert!(pension > 2000 / 10, "pension {pension}");
    assert!(mothers > 2000 / 10, "mothers {mothers}");
    assert!(self_emp > 40, "self-employed {self_emp}");
    // person ids are stable and unique
    let ids: BTreeSet<u64> = p.persons.iter().map(|q| q.profile.person_id).collect();
    assert_eq!(ids.len(), p.persons.len());
}

#[test]
fn config_validation_rejects_bad_effects() {
    let mut e = PlantedEffects::default();
    e.maternity_income_drop = 1.0;
    assert!(generate_population(5, &e, 1).is_err());
    let mut e = PlantedEffects::default();
    e.maternity_recovery_years = 0;
    assert!(generate_population(5, &e, 1).is_err());
}
