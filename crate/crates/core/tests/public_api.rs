use ivfg::backends::{BackboneConfig, BackendBundle};
use ivfg::data::{identity_split, load_dataset, synth_toy_dataset, ToyDatasetSpec};
use ivfg::evaluation::{compute_auc, compute_eer, fid, ScoreSet};
use ivfg::losses::{cosine_embedding_loss, Target};
use ivfg::pipeline::{assign_keys, batch_transform, load_virtual_set, save_virtual_set, KeyMode};
use ivfg::projector::{KeyVector, Projector, ProjectorConfig};
use ivfg::FeatureVector;
use proptest::prelude::*;
use std::collections::BTreeSet;

fn nonzero_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, d).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn scores() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(-1.0..1.0f64, 1..40), prop::collection::vec(-1.0..1.0f64, 1..40))
}

proptest! {
    #[test]
    fn embedding_loss_stays_in_range((a, b) in (2usize..16).prop_flat_map(|d| (nonzero_vec(d), nonzero_vec(d))), m in -1.0..1.0f64) {
        let (a, b) = (FeatureVector(a), FeatureVector(b));
        let same = cosine_embedding_loss(&a, &b, Target::Same, m).unwrap();
        let diff = cosine_embedding_loss(&a, &b, Target::Different, m).unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&same));
        prop_assert!(diff >= m && diff <= 1.0f64.max(m) + 1e-12);
        prop_assert_eq!(cosine_embedding_loss(&b, &a, Target::Different, m).unwrap(), diff);
    }

    #[test]
    fn eer_is_a_rate_and_ignores_score_shifts((g, i) in scores(), shift in -3.0..3.0f64) {
        let e = compute_eer(&ScoreSet::new(g.clone(), i.clone()).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&e.eer));
        let shifted = ScoreSet::new(g.iter().map(|s| s + shift).collect(), i.iter().map(|s| s + shift).collect()).unwrap();
        prop_assert!((compute_eer(&shifted).unwrap().eer - e.eer).abs() < 1e-9);
    }

    #[test]
    fn auc_is_complementary_under_role_swap((g, i) in scores()) {
        let auc = compute_auc(&ScoreSet::new(g.clone(), i.clone()).unwrap()).unwrap();
        let swapped = compute_auc(&ScoreSet::new(i, g).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&auc));
        prop_assert!((auc + swapped - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fid_is_symmetric_and_nonnegative(
        a in prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 3), 4..12),
        b in prop::collection::vec(prop::collection::vec(-2.0..2.0f64, 3), 4..12),
    ) {
        let a: Vec<_> = a.into_iter().map(FeatureVector).collect();
        let b: Vec<_> = b.into_iter().map(FeatureVector).collect();
        let ab = fid(&a, &b).unwrap();
        prop_assert!(ab > -1e-9);
        prop_assert!((ab - fid(&b, &a).unwrap()).abs() < 1e-6 * (1.0 + ab));
    }

    #[test]
    fn key_strings_round_trip(bits in prop::collection::vec(0u8..2, 1..130)) {
        let k = KeyVector::new(bits.clone()).unwrap();
        prop_assert_eq!(k.to_string().parse::<KeyVector>().unwrap(), k.clone());
        prop_assert_eq!(k.bits(), &bits[..]);
    }
}

#[test]
fn split_is_identity_disjoint_and_complete() {
    let ds = synth_toy_dataset(&ToyDatasetSpec { identity_count: 20, images_per_identity: 2, resolution: 8, ..ToyDatasetSpec::default() }).unwrap();
    let split = identity_split(&ds, [8, 1, 1], 3).unwrap();
    let parts = [&split.train, &split.val, &split.test];
    assert_eq!(parts.map(|p| p.identity_count()), [16, 2, 2]);
    let labels: BTreeSet<&str> = parts.iter().flat_map(|p| p.labels()).collect();
    assert_eq!(labels.len(), 20);
}

#[test]
fn virtual_sets_and_projectors_survive_disk() {
    let backbone = BackboneConfig { resolution: 8, widths: vec![4], feature_dim: 6, recognizer_dim: 6, latent_dim: 5, ..BackboneConfig::default() };
    let bundle = BackendBundle::random(&backbone, 3, 2).unwrap().freeze();
    let ds = synth_toy_dataset(&ToyDatasetSpec { identity_count: 3, images_per_identity: 2, resolution: 8, ..ToyDatasetSpec::default() }).unwrap();
    let cfg = ProjectorConfig { feature_dim: 6, key_bits: 8, hidden_layers: 2, hidden_width: 16, latent_dim: 5 };
    let projector = Projector::init(&cfg, 4).unwrap();
    let assignment = assign_keys(&ds.labels(), KeyMode::SetA, 8, 9).unwrap();
    let virtuals = batch_transform(&bundle, &projector, &ds, &assignment).unwrap();
    assert_eq!(virtuals.labels(), ds.labels());

    let dir = tempfile::tempdir().unwrap();
    projector.save(&dir.path().join("projector")).unwrap();
    assert_eq!(Projector::load(&dir.path().join("projector")).unwrap(), projector);

    let root = dir.path().join("virtual");
    save_virtual_set(&root, &virtuals, &assignment).unwrap();
    let (loaded, keys) = load_virtual_set(&root).unwrap();
    assert_eq!(keys.key(ds.labels()[0]).unwrap(), assignment.key(ds.labels()[0]).unwrap());
    for (a, b) in loaded.identities().iter().zip(virtuals.identities()) {
        assert_eq!(a.images, b.images);
    }
    assert_eq!(load_dataset(&root).unwrap().image_count(), ds.image_count());
}
