mod common;

use std::collections::BTreeMap;

use facial_basis::coding::objective_value;
use facial_basis::learn::{
    assign_names, learn, rank_by_activation, update_dictionary_step, InitStrategy, LearnConfig,
};
use facial_basis::model::{validate_dictionary, BasisDictionary, CoefficientSeries, GroupCode, LandmarkTopology};
use facial_basis::synth::{generate_planted_corpus, SynthSpec};
use facial_basis::Error;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn one_each() -> BTreeMap<GroupCode, usize> {
    GroupCode::ALL.iter().map(|&g| (g, 1)).collect()
}

fn small_config(seed: u64) -> LearnConfig {
    LearnConfig {
        atom_count: 12,
        group_allocation: Some(GroupCode::ALL.iter().map(|&g| (g, 2)).collect()),
        outer_iterations: 15,
        seed,
        ..LearnConfig::default()
    }
}

#[test]
fn dictionary_update_never_raises_objective() {
    let topo = LandmarkTopology::ibug51();
    let groups = [GroupCode::MO, GroupCode::MO, GroupCode::NO, GroupCode::LE, GroupCode::LB, GroupCode::MO];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..100 {
        let dict = common::random_dictionary(&topo, &groups, &mut rng);
        let samples = Array2::from_shape_fn((30, topo.dim()), |_| rng.sample::<f64, _>(StandardNormal));
        let codes = Array2::from_shape_fn((30, groups.len()), |_| {
            if rng.gen_bool(0.4) { rng.sample::<f64, _>(StandardNormal) } else { 0.0 }
        });
        let before = objective_value(&dict, samples.view(), codes.view(), 0.2).unwrap();
        let atoms = update_dictionary_step(dict.atoms(), samples.view(), codes.view(), &topo, &groups).unwrap();
        let after_dict = BasisDictionary::new(topo.clone(), atoms, groups.to_vec(), 0.2).unwrap();
        let after = objective_value(&after_dict, samples.view(), codes.view(), 0.2).unwrap();
        assert!(after <= before + 1e-9, "trial {trial}: {before} -> {after}");
        assert!(validate_dictionary(&after_dict).is_valid(), "trial {trial}");
    }
}

#[test]
fn unused_atoms_are_left_alone() {
    let topo = LandmarkTopology::ibug51();
    let groups = [GroupCode::MO, GroupCode::NO];
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let dict = common::random_dictionary(&topo, &groups, &mut rng);
    let samples = Array2::from_shape_fn((5, topo.dim()), |_| rng.sample::<f64, _>(StandardNormal));
    let atoms = update_dictionary_step(dict.atoms(), samples.view(), Array2::zeros((5, 2)).view(), &topo, &groups).unwrap();
    assert_eq!(&atoms, dict.atoms());
}

#[test]
fn single_atom_single_sample_closed_form() {
    let topo = LandmarkTopology::ibug51();
    let mo = topo.rows(GroupCode::MO);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let start = common::random_dictionary(&topo, &[GroupCode::MO], &mut rng);
    for target_norm in [3.0, 0.5] {
        let mut d = Array1::<f64>::zeros(topo.dim());
        for &r in &mo {
            d[r] = rng.sample(StandardNormal);
        }
        // A stray value outside the mask must not leak into the atom.
        d[topo.rows(GroupCode::LB)[0]] = 5.0;
        let inside: f64 = mo.iter().map(|&r| d[r] * d[r]).sum::<f64>().sqrt();
        for &r in &mo {
            d[r] *= target_norm / inside;
        }
        let samples = d.clone().insert_axis(ndarray::Axis(0));
        let codes = Array2::from_elem((1, 1), 1.0);
        let atoms = update_dictionary_step(start.atoms(), samples.view(), codes.view(), &topo, &[GroupCode::MO]).unwrap();
        let scale = 1.0 / target_norm.max(1.0);
        for r in 0..topo.dim() {
            let want = if topo.group_of_row(r) == GroupCode::MO { d[r] * scale } else { 0.0 };
            assert!((atoms[[r, 0]] - want).abs() <= 1e-12, "row {r}");
        }
    }
}

#[test]
fn rank_one_corpus_is_captured() {
    let topo = LandmarkTopology::ibug51();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut d = Array1::<f64>::zeros(topo.dim());
    for r in topo.rows(GroupCode::MO) {
        d[r] = rng.sample(StandardNormal);
    }
    let unit = &d / d.dot(&d).sqrt();
    let samples = Array2::from_shape_fn((20, topo.dim()), |(_, c)| d[c]);
    for init in [InitStrategy::MaskedGaussian, InitStrategy::MaskedDataSamples] {
        let cfg = LearnConfig {
            atom_count: 6,
            group_allocation: Some(one_each()),
            outer_iterations: 30,
            init,
            ..LearnConfig::default()
        };
        let out = learn(samples.view(), &topo, &cfg).unwrap();
        let k = out.dictionary.atom_groups().iter().position(|&g| g == GroupCode::MO).unwrap();
        let atom = out.dictionary.atom(k);
        let cos = atom.dot(&unit) / atom.dot(&atom).sqrt();
        assert!(cos.abs() >= 0.99, "{init:?}: {cos}");
    }
}

#[test]
fn learning_is_seed_deterministic_and_sparse() {
    let corpus = generate_planted_corpus(&SynthSpec::planted_benchmark(21)).unwrap();
    let a = learn(corpus.samples.view(), &corpus.truth.topology().clone(), &small_config(5)).unwrap();
    let b = learn(corpus.samples.view(), &corpus.truth.topology().clone(), &small_config(5)).unwrap();
    assert_eq!(a.dictionary, b.dictionary);
    assert!(a.dictionary.atoms().iter().zip(b.dictionary.atoms().iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a.log, b.log);

    let planted = 3.0 / 12.0;
    let nonzero = a.codes.iter().filter(|&&v| v != 0.0).count() as f64 / a.codes.len() as f64;
    assert!(nonzero <= 2.0 * planted, "nonzero fraction {nonzero}");
    assert!(a.log.final_objective() <= a.log.initial_objective());
    assert!(validate_dictionary(&a.dictionary).is_valid());
}

#[test]
fn bad_corpora_are_rejected() {
    let topo = LandmarkTopology::ibug51();
    let cfg = LearnConfig {
        atom_count: 6,
        group_allocation: Some(one_each()),
        ..LearnConfig::default()
    };
    let few = Array2::from_elem((5, topo.dim()), 1.0);
    assert!(matches!(learn(few.view(), &topo, &cfg), Err(Error::Input(_))));
    let zeros = Array2::zeros((10, topo.dim()));
    assert!(matches!(learn(zeros.view(), &topo, &cfg), Err(Error::Degenerate(_))));
    let mut bad = Array2::from_elem((10, topo.dim()), 1.0);
    bad[[3, 7]] = f64::NAN;
    assert!(matches!(learn(bad.view(), &topo, &cfg), Err(Error::Input(_))));
}

#[test]
fn ranking_cases() {
    let topo = LandmarkTopology::ibug51();
    let groups = [GroupCode::MO; 5];
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let dict = common::random_dictionary(&topo, &groups, &mut rng);

    let mut only3 = Array2::zeros((8, 5));
    only3.column_mut(3).fill(0.4);
    let ranked = rank_by_activation(&dict, &[CoefficientSeries::new(30.0, only3, None).unwrap()]).unwrap();
    assert_eq!(ranked.activation_rank().unwrap()[0], 3);
    assert_eq!(ranked.atoms(), dict.atoms());

    let mut tie = Array2::zeros((4, 5));
    tie.column_mut(4).fill(-1.0);
    tie.column_mut(1).fill(1.0);
    let ranked = rank_by_activation(&dict, &[CoefficientSeries::new(30.0, tie, None).unwrap()]).unwrap();
    assert_eq!(&ranked.activation_rank().unwrap()[..2], &[1, 4]);

    let series: Vec<CoefficientSeries> = (0..3)
        .map(|i| {
            let frames = 10 + 7 * i;
            let z = Array2::from_shape_fn((frames, 5), |_| {
                if rng.gen_bool(0.5) { rng.sample::<f64, _>(StandardNormal) } else { 0.0 }
            });
            CoefficientSeries::new(30.0, z, None).unwrap()
        })
        .collect();
    let mut totals = [0.0f64; 5];
    let mut frames = 0.0;
    for s in &series {
        for row in s.bu_coefficients().rows() {
            for k in 0..5 {
                totals[k] += row[k].abs();
            }
            frames += 1.0;
        }
    }
    let mut want: Vec<usize> = (0..5).collect();
    want.sort_by(|&a, &b| (totals[b] / frames).partial_cmp(&(totals[a] / frames)).unwrap().then(a.cmp(&b)));
    let ranked = rank_by_activation(&dict, &series).unwrap();
    assert_eq!(ranked.activation_rank().unwrap(), want.as_slice());

    assert!(rank_by_activation(&dict, &[]).is_err());
    let wrong = CoefficientSeries::new(30.0, Array2::zeros((3, 4)), None).unwrap();
    assert!(rank_by_activation(&dict, &[wrong]).is_err());
}

#[test]
fn naming_cases() {
    let topo = LandmarkTopology::ibug51();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let dict = common::random_dictionary(&topo, &[GroupCode::MO, GroupCode::MO, GroupCode::LB], &mut rng);
    assert_eq!(assign_names(&dict).atom_names(), ["MO-1", "MO-2", "LB-1"]);
    let dict = common::random_dictionary(&topo, &[GroupCode::RE; 3], &mut rng);
    assert_eq!(assign_names(&dict).atom_names(), ["RE-1", "RE-2", "RE-3"]);

    let groups: Vec<GroupCode> = LearnConfig::default()
        .resolved_allocation(&topo)
        .unwrap()
        .into_iter()
        .flat_map(|(g, n)| std::iter::repeat_n(g, n))
        .collect();
    let named = assign_names(&common::random_dictionary(&topo, &groups, &mut rng));
    let names: std::collections::BTreeSet<&String> = named.atom_names().iter().collect();
    assert_eq!(names.len(), 50);
    for (g, n) in LearnConfig::default().resolved_allocation(&topo).unwrap() {
        let prefix = format!("{g}-");
        assert_eq!(named.atom_names().iter().filter(|s| s.starts_with(&prefix)).count(), n);
    }
}
