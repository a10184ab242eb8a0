use chanfuse::fusion::{merge_all, PersonalizedWeights};
use chanfuse::ingest::{load_dataset, validate_dataset, write_dataset, LoadOptions};
use chanfuse::metrics::{evaluate, evaluate_objective, Metric};
use chanfuse::synth::{generate_benchmark, SyntheticSpec};
use chanfuse::{WeightVector, Weights};

fn spec() -> SyntheticSpec {
    let mut spec = SyntheticSpec::two_segment(11);
    spec.n_users = 80;
    spec.n_items = 500;
    spec
}

#[test]
fn written_benchmark_loads_back_identically() {
    let ds = generate_benchmark(&spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = write_dataset(&ds, dir.path()).unwrap();
    let (loaded, report) = load_dataset(&paths, LoadOptions { strict: true }).unwrap();
    assert_eq!(report.users_kept, 80);
    assert_eq!(loaded, ds);

    let again = tempfile::tempdir().unwrap();
    let paths = write_dataset(&loaded, again.path()).unwrap();
    assert_eq!(load_dataset(&paths, LoadOptions::default()).unwrap().0, loaded);
}

#[test]
fn benchmark_passes_validation_and_evaluates_consistently() {
    let ds = generate_benchmark(&spec()).unwrap();
    let report = validate_dataset(&ds, true);
    assert!(report.is_ok(), "{:?}", report.findings);

    let w = WeightVector::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap();
    let full = evaluate(&ds, Weights::Global(&w), 50, &ds.all_users()).unwrap();
    let objective = evaluate_objective(&ds, Weights::Global(&w), 50, Metric::Recall).unwrap();
    assert_eq!(full.mean_recall, objective);
    assert_eq!(full.user_count, 80);

    let same_for_all = PersonalizedWeights {
        per_user: ds.users.iter().map(|u| (u.clone(), w.clone())).collect(),
    };
    assert_eq!(
        merge_all(&ds, Weights::Personalized(&same_for_all), 50).unwrap(),
        merge_all(&ds, Weights::Global(&w), 50).unwrap()
    );
}

#[test]
fn personalized_weights_must_cover_every_user() {
    let ds = generate_benchmark(&spec()).unwrap();
    let w = WeightVector::uniform(4);
    let mut partial = PersonalizedWeights {
        per_user: ds.users.iter().map(|u| (u.clone(), w.clone())).collect(),
    };
    partial.per_user.remove(&ds.users[7]);
    let err = merge_all(&ds, Weights::Personalized(&partial), 50).unwrap_err();
    assert!(err.to_string().contains(&ds.users[7]), "{err}");
}
