use isoclip::align::{self, Modality};
use isoclip::ncm;
use isoclip::retrieval::{self, EmbeddingDataset, EvalOptions};
use isoclip::synthdata::{self, PlantedProjectors, PlantedSpec};
use isoclip::Error;

fn fixture(
    seed: u64,
) -> (
    PlantedSpec,
    PlantedProjectors,
    EmbeddingDataset,
    EmbeddingDataset,
) {
    let spec = PlantedSpec::acceptance(seed);
    let truth = synthdata::make_projectors(&spec).unwrap();
    let (image, text) = synthdata::make_embeddings(&spec, &truth).unwrap();
    (spec, truth, image, text)
}

#[test]
fn fixture_is_deterministic_per_seed() {
    let (_, a, ia, _) = fixture(4);
    let (_, b, ib, _) = fixture(4);
    assert_eq!(a, b);
    assert_eq!(ia.features, ib.features);
    let (_, c, _, _) = fixture(5);
    assert_ne!(a.pair.wi, c.pair.wi);
}

#[test]
fn recovered_band_spans_the_planted_subspace() {
    let (spec, truth, _, _) = fixture(1);
    let aligned = align::isoclip(&truth.pair, spec.n_top, spec.n_bottom).unwrap();
    let mid = spec.middle();
    let planted_u = truth.u.columns(mid.start, mid.len()).into_owned();
    let planted_v = truth.v.columns(mid.start, mid.len()).into_owned();
    assert!(synthdata::max_principal_angle(&aligned.u_s, &planted_u).unwrap() < 1e-8);
    assert!(synthdata::max_principal_angle(&aligned.v_s, &planted_v).unwrap() < 1e-8);

    let op = align::inter_modal_operator(&truth.pair).unwrap();
    for (a, b) in op.singular_values().iter().zip(&spec.spectrum) {
        assert!((a - b).abs() < 1e-10 * spec.spectrum[0]);
    }
}

#[test]
fn planted_band_beats_baseline_for_several_seeds() {
    for seed in 0..4 {
        let (spec, truth, image, text) = fixture(seed);
        let aligned = align::isoclip(&truth.pair, spec.n_top, spec.n_bottom).unwrap();
        let opts = EvalOptions::default();
        for (m, ds) in [(Modality::Image, &image), (Modality::Text, &text)] {
            let base = retrieval::retrieve(truth.pair.projector(m), ds, &[], opts)
                .unwrap()
                .map;
            let iso = retrieval::retrieve(aligned.projector(m), ds, &[], opts)
                .unwrap()
                .map;
            assert!(iso > base + 0.3, "seed {seed} {m:?}: {base} -> {iso}");
        }
    }
}

#[test]
fn extending_the_band_into_the_top_degrades_retrieval() {
    let (spec, truth, image, _) = fixture(0);
    let op = align::inter_modal_operator(&truth.pair).unwrap();
    let planted = align::select_band(&op, spec.n_top, spec.n_bottom).unwrap();
    let opts = EvalOptions::default();
    let maps: Vec<f64> = [0, 2, 4, 8]
        .iter()
        .map(|&e| {
            let band = planted.extended(e, 0).unwrap();
            let aligned = align::align_projectors(&truth.pair, &op, &band).unwrap();
            retrieval::retrieve(&aligned.wi_hat, &image, &[], opts)
                .unwrap()
                .map
        })
        .collect();
    assert!(maps.windows(2).all(|w| w[1] < w[0]), "{maps:?}");
    assert!(planted.extended(spec.n_top + 1, 0).is_err());
}

#[test]
fn middle_band_beats_top_and_bottom() {
    let (_, truth, image, _) = fixture(2);
    let op = align::inter_modal_operator(&truth.pair).unwrap();
    let variants = align::band_variants(&op, 16).unwrap();
    let opts = EvalOptions::default();
    let map = |band| {
        let aligned = align::align_projectors(&truth.pair, &op, &band).unwrap();
        retrieval::retrieve(&aligned.wi_hat, &image, &[], opts)
            .unwrap()
            .map
    };
    let (top, middle, bottom) = (
        map(variants.top),
        map(variants.middle),
        map(variants.bottom),
    );
    assert!(middle > top && middle > bottom, "{top} {middle} {bottom}");
    assert_eq!(variants.middle.retained(), 24..40);
}

#[test]
fn ncm_prototypes_separate_classes_after_alignment() {
    let (spec, truth, image, text) = fixture(3);
    let aligned = align::isoclip(&truth.pair, spec.n_top, spec.n_bottom).unwrap();
    // Even samples define the class means, odd samples are classified.
    let split = |ds: &EmbeddingDataset, parity: usize| {
        let rows: Vec<usize> = (0..ds.len()).filter(|i| i % 2 == parity).collect();
        let labels: Vec<i64> = rows.iter().map(|&i| ds.labels[i]).collect();
        (ds.features.select_rows(rows.iter()), labels)
    };
    for (m, ds) in [(Modality::Image, &image), (Modality::Text, &text)] {
        let (train_x, train_y) = split(ds, 0);
        let (test_x, test_y) = split(ds, 1);
        let run = |w| {
            let protos = ncm::compute_prototypes(w, &train_x, &train_y).unwrap();
            assert_eq!(protos.len(), spec.classes);
            ncm::classify(&protos, w, &test_x, &test_y)
                .unwrap()
                .accuracy
        };
        let base = run(truth.pair.projector(m));
        let iso = run(aligned.projector(m));
        assert!(iso >= base, "{m:?}: {base} -> {iso}");
        assert!(iso > 0.95, "{m:?}: {iso}");
    }
}

#[test]
fn noiseless_fixture_classifies_perfectly() {
    let mut spec = PlantedSpec::acceptance(8);
    spec.noise_sigma = 0.0;
    let truth = synthdata::make_projectors(&spec).unwrap();
    let (image, _) = synthdata::make_embeddings(&spec, &truth).unwrap();
    let aligned = align::isoclip(&truth.pair, spec.n_top, spec.n_bottom).unwrap();
    let protos = ncm::compute_prototypes(&aligned.wi_hat, &image.features, &image.labels).unwrap();
    let report = ncm::classify(&protos, &aligned.wi_hat, &image.features, &image.labels).unwrap();
    assert_eq!(report.accuracy, 1.0);
    let map = retrieval::retrieve(&aligned.wi_hat, &image, &[], EvalOptions::default())
        .unwrap()
        .map;
    assert_eq!(map, 1.0);
}

#[test]
fn flat_spectrum_at_band_edge_is_reported() {
    let mut spec = PlantedSpec::acceptance(0);
    let d = spec.d;
    spec.spectrum = vec![1.0; d];
    let truth = synthdata::make_projectors(&spec).unwrap();
    assert!(!truth.warnings.is_empty());
}

#[test]
fn invalid_specs_are_rejected() {
    let mut spec = PlantedSpec::acceptance(0);
    spec.n_top = 40;
    spec.n_bottom = 24;
    assert!(matches!(
        synthdata::make_projectors(&spec),
        Err(Error::InvalidParameter(_))
    ));
    let mut spec = PlantedSpec::acceptance(0);
    spec.d = 100;
    assert!(synthdata::make_projectors(&spec).is_err());
    let mut spec = PlantedSpec::acceptance(0);
    spec.spectrum[3] = 50.0;
    assert!(synthdata::make_projectors(&spec).is_err());
}
