//! Frozen outputs. A change here means previously trained checkpoints or
//! cached sweep cells no longer reproduce.

use protodiv::config::CrfConfig;
use protodiv::evaluation::crf_refine;
use protodiv::mask_refiner::{RegionEncoder, StubRegionEncoder};
use protodiv::Tensor;

#[test]
fn stub_region_embeddings_are_frozen() {
    let patches: Vec<Tensor> = (0..2)
        .map(|i| Tensor::from_fn(&[3, 4, 4], |j| ((i * 5 + j * 3) % 17) as f64 / 16.0))
        .collect();
    let e = StubRegionEncoder::new(0x5eed, 4, 6).encode_batch(&patches).unwrap();
    let golden = [
        -0.9948517100102454,
        -0.22482095363660592,
        0.46242621789213695,
        -0.9245222880298429,
        -0.6496610577497438,
        0.578125,
        -0.9715019773102094,
        0.14941110151783274,
        -0.5764759440308453,
        -0.9832917928122858,
        0.5039243985808299,
        0.5747366924296725,
    ];
    assert_eq!(e.shape(), &[2, 6]);
    for (a, b) in e.data().iter().zip(golden) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

fn confident(labels: &[usize], c: usize) -> Tensor {
    let mut p = Tensor::zeros(&[c, 8, 8]);
    for (i, &l) in labels.iter().enumerate() {
        for k in 0..c {
            p.data_mut()[k * 64 + i] = if k == l { 0.9 } else { 0.1 / (c - 1) as f64 };
        }
    }
    p
}

#[rustfmt::skip]
const QUADRANTS: [usize; 64] = [
    0, 0, 0, 0, 1, 1, 1, 1,
    0, 0, 0, 0, 1, 1, 1, 1,
    0, 0, 0, 0, 1, 1, 1, 1,
    0, 0, 0, 0, 1, 1, 1, 1,
    2, 2, 2, 2, 3, 3, 3, 3,
    2, 2, 2, 2, 3, 3, 3, 3,
    2, 2, 2, 2, 3, 3, 3, 3,
    2, 2, 2, 2, 3, 3, 3, 3,
];

#[test]
fn crf_keeps_separated_confident_blobs_on_a_uniform_image() {
    let img = Tensor::full(&[3, 8, 8], 0.5);
    let out = crf_refine(&img, &confident(&QUADRANTS, 4), &CrfConfig::default()).unwrap();
    assert_eq!(out, QUADRANTS);
}

#[test]
fn crf_absorbs_minority_blobs_when_colour_gives_no_edges() {
    // With a flat image the appearance kernel is nearly global, so the class
    // holding half the pixels outvotes two 4x4 corner blobs.
    let labels: Vec<usize> = (0..64)
        .map(|i| match (i / 8 < 4, i % 8 < 4) {
            (true, true) => 1,
            (false, false) => 2,
            _ => 0,
        })
        .collect();
    let img = Tensor::full(&[3, 8, 8], 0.5);
    let out = crf_refine(&img, &confident(&labels, 3), &CrfConfig::default()).unwrap();
    assert_eq!(out, vec![0; 64]);

    // a colour edge around the blobs keeps them
    let edged = Tensor::from_fn(&[3, 8, 8], |j| if labels[j % 64] == 0 { 0.2 } else { 0.8 });
    let out = crf_refine(&edged, &confident(&labels, 3), &CrfConfig::default()).unwrap();
    assert_eq!(out, labels);
}
