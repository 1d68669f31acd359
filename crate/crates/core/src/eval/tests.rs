use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::config::{Config, Patch};
use crate::synthcorpus::{generate_corpus, CorpusSpec, NounSpan, VideoTensor};

fn mat(n: usize, data: Vec<f64>) -> SimilarityMatrix {
    SimilarityMatrix::new(n, n, data).unwrap()
}

/// Sort-based ranking, independent of `true_rank`.
fn oracle_ranks(sim: &SimilarityMatrix) -> Vec<usize> {
    (0..sim.cols)
        .map(|c| {
            let mut order: Vec<usize> = (0..sim.rows).collect();
            order.sort_by(|&a, &b| sim.get(b, c).partial_cmp(&sim.get(a, c)).unwrap().then(a.cmp(&b)));
            order.iter().position(|&v| v == c).unwrap() + 1
        })
        .collect()
}

fn random_sim(rng: &mut ChaCha8Rng, n: usize) -> SimilarityMatrix {
    // coarse values so ties are common
    mat(n, (0..n * n).map(|_| f64::from(rng.gen_range(-4i32..=4)) / 4.0).collect())
}

#[test]
fn perfect_retrieval() {
    let n = 6;
    let data = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
    let r = retrieval_metrics(&mat(n, data)).unwrap();
    assert_eq!((r.r1, r.r5, r.r10, r.medr), (100.0, 100.0, 100.0, 1.0));
    assert_eq!(r.pool, n);
}

#[test]
fn constant_matrix_ranks_by_index() {
    let n = 5;
    let sim = mat(n, vec![0.3; n * n]);
    let ranks: Vec<usize> = (0..n).map(|c| true_rank(&sim, c, c)).collect();
    assert_eq!(ranks, vec![1, 2, 3, 4, 5]);
    assert_eq!(retrieval_metrics(&sim).unwrap().medr, 3.0);
}

#[test]
fn non_square_is_an_argument_error() {
    let sim = SimilarityMatrix::new(2, 3, vec![0.0; 6]).unwrap();
    assert!(matches!(retrieval_metrics(&sim), Err(Error::Argument(_))));
}

#[test]
fn ranks_match_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let n = rng.gen_range(1..12);
        let sim = random_sim(&mut rng, n);
        let mut want = oracle_ranks(&sim);
        let got: Vec<usize> = (0..n).map(|c| true_rank(&sim, c, c)).collect();
        assert_eq!(got, want);
        let r = retrieval_metrics(&sim).unwrap();
        want.sort_unstable();
        let med = if n % 2 == 1 {
            want[n / 2] as f64
        } else {
            (want[n / 2 - 1] + want[n / 2]) as f64 / 2.0
        };
        assert_eq!(r.medr, med);
        let at = |k: usize| 100.0 * want.iter().filter(|&&x| x <= k).count() as f64 / n as f64;
        assert_eq!((r.r1, r.r5, r.r10), (at(1), at(5), at(10)));
    }
}

proptest! {
    #[test]
    fn recall_is_monotone_and_medr_in_range(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sim = mat(n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let r = retrieval_metrics(&sim).unwrap();
        prop_assert!(r.r1 <= r.r5 && r.r5 <= r.r10);
        prop_assert!(r.medr >= 1.0 && r.medr <= n as f64);
    }

    #[test]
    fn rankings_ignore_temperature(seed in any::<u64>(), n in 1usize..12, tau in 0.01f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sim = random_sim(&mut rng, n);
        let scaled = SimilarityMatrix::new(n, n, sim.data.iter().map(|x| x / tau).collect()).unwrap();
        prop_assert_eq!(retrieval_metrics(&sim).unwrap(), retrieval_metrics(&scaled).unwrap());
    }
}

#[test]
fn gap_extremes() {
    let labels = [0, 0, 1, 1];
    let block = mat(4, (0..16).map(|i| if labels[i / 4] == labels[i % 4] { 1.0 } else { 0.0 }).collect());
    assert_eq!(boundary_gap(&block, &labels).unwrap(), 1.0);
    assert!(boundary_gap(&mat(4, vec![0.4; 16]), &labels).unwrap().abs() < 1e-15);
}

#[test]
fn gap_by_hand() {
    #[rustfmt::skip]
    let m = mat(4, vec![
        1.0, 0.8, 0.1, 0.2,
        0.8, 1.0, 0.3, 0.0,
        0.1, 0.3, 1.0, 0.6,
        0.2, 0.0, 0.6, 1.0,
    ]);
    // within: 0.8, 0.8, 0.6, 0.6 → 0.7; across: 0.1, 0.2, 0.3, 0.0 twice → 0.15
    let g = boundary_gap(&m, &[0, 0, 1, 1]).unwrap();
    assert!((g - 0.55).abs() < 1e-12);
}

#[test]
fn gap_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let n = rng.gen_range(4..9);
        let m = mat(n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let cut = rng.gen_range(2..=n - 2);
        let labels: Vec<u8> = (0..n).map(|i| u8::from(i >= cut)).collect();
        let (mut w, mut wn, mut c, mut cn) = (Vec::new(), 0.0, Vec::new(), 0.0);
        for i in 0..n {
            for j in 0..n {
                if i != j && (i < cut) == (j < cut) {
                    w.push(m.get(i, j));
                    wn += 1.0;
                } else if (i < cut) != (j < cut) {
                    c.push(m.get(i, j));
                    cn += 1.0;
                }
            }
        }
        let want = w.iter().sum::<f64>() / wn - c.iter().sum::<f64>() / cn;
        assert_eq!(boundary_gap(&m, &labels).unwrap(), want);
    }
}

#[test]
fn single_scene_gap_is_an_argument_error() {
    assert!(matches!(boundary_gap(&mat(3, vec![1.0; 9]), &[0, 0, 0]), Err(Error::Argument(_))));
}

fn small_corpus() -> Corpus {
    generate_corpus(
        &CorpusSpec {
            size: 10,
            twoscene_frac: 0.2,
            ..CorpusSpec::default()
        },
        4,
    )
    .unwrap()
}

fn model() -> Model<f32> {
    let mut c = Config::default();
    c.model.dim = 32;
    c.model.common_dim = 16;
    Model::new(&c.model, 2).unwrap()
}

#[test]
fn frame_matrix_is_a_cosine_matrix() {
    let corpus = small_corpus();
    let m = model();
    let item = &corpus.items[corpus.indices(Split::Probe)[0]];
    let s = frame_similarity_matrix(item, &m).unwrap();
    assert_eq!((s.rows, s.cols), (4, 4));
    for i in 0..4 {
        assert!((s.get(i, i) - 1.0).abs() < 1e-6);
        for j in 0..4 {
            assert!((s.get(i, j) - s.get(j, i)).abs() < 1e-6);
        }
    }
    let labels = row_labels(&item.scene_label, m.grid()).unwrap();
    assert_eq!(labels, vec![0, 0, 1, 1]);
}

#[test]
fn static_video_looks_the_same_everywhere() {
    let m = model();
    let mut v = VideoTensor::zeros(8, 32, 32);
    let frame: Vec<f32> = (0..32 * 32 * 3).map(|i| ((i * 7) % 11) as f32 / 10.0).collect();
    for t in 0..8 {
        v.frame_mut(t).copy_from_slice(&frame);
    }
    let item = CaptionedVideo {
        video: v,
        caption: String::new(),
        noun_spans: Vec::new(),
        region_masks: Vec::new(),
        scene_label: vec![0; 8],
    };
    let s = frame_similarity_matrix(&item, &m).unwrap();
    assert!(s.data.iter().all(|&x| x > 0.95), "{:?}", s.data);
}

#[test]
fn voxel_overlap_follows_the_grid() {
    let grid = PatchGrid::new(4, 4, 4, Patch::new(2, 2, 2)).unwrap();
    let mut mask = RegionMask::empty(4, 4, 4);
    // frame 3, pixel (y=1, x=2) → voxel (t'=1, r=0, c=1)
    mask.bits[(3 * 4 + 1) * 4 + 2] = true;
    let hit = voxel_overlap(&mask, &grid).unwrap();
    assert_eq!(hit.iter().filter(|&&h| h).count(), 1);
    assert!(hit[4 + 1]);
    assert!(majority_overlap(&[5, 5, 0], &hit));
    assert!(!majority_overlap(&[5, 0], &hit));
    assert!(!majority_overlap(&[], &hit));
}

fn one_object_item(grid: &PatchGrid) -> (CaptionedVideo, Vec<usize>) {
    let p = grid.patch;
    let (t_n, h, w) = (grid.frames * p.t, grid.rows * p.h, grid.cols * p.w);
    let mut mask = RegionMask::empty(t_n, h, w);
    // object fills the top-left voxel column of every temporal row
    for t in 0..t_n {
        for y in 0..p.h {
            for x in 0..p.w {
                mask.bits[(t * h + y) * w + x] = true;
            }
        }
    }
    let voxels: Vec<usize> = (0..grid.frames).map(|t| t * grid.rows * grid.cols).collect();
    let item = CaptionedVideo {
        video: VideoTensor::zeros(t_n, h, w),
        caption: "a red ball".into(),
        noun_spans: vec![NounSpan {
            start: 2,
            end: 10,
            object: 0,
        }],
        region_masks: vec![mask],
        scene_label: vec![0; t_n],
    };
    (item, voxels)
}

#[test]
fn perfect_grounding_scores_one() {
    let grid = PatchGrid::new(8, 32, 32, Patch::new(2, 8, 8)).unwrap();
    let (item, voxels) = one_object_item(&grid);
    let mut assignment = vec![0; grid.num_tokens()];
    for &v in &voxels {
        assignment[v] = 2;
    }
    let groups = vec![
        1.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, //
        0.0, 0.0, 1.0,
    ];
    let noun = vec![vec![0.0, 0.6, 0.8]];
    let (pairs, overlaps) = ground_item(7, &item, &grid, &groups, &assignment, &noun).unwrap();
    assert_eq!(pairs.len(), 1);
    assert_eq!((pairs[0].item, pairs[0].group), (7, 2));
    assert_eq!(pairs[0].voxels, voxels);
    let r = grounding_report(&pairs, &overlaps);
    assert_eq!((r.accuracy, r.pairs), (1.0, 1));

    // the background group instead
    let (pairs, _) = ground_item(7, &item, &grid, &groups, &assignment, &[vec![1.0, 0.0, 0.0]]).unwrap();
    assert!(!pairs[0].hit);
}

#[test]
fn no_pairs_is_vacuously_perfect() {
    let r = grounding_report(&[], &[]);
    assert_eq!((r.accuracy, r.pairs, r.null_rate), (1.0, 0, 0.0));
}

#[test]
fn permutation_null_is_deterministic_and_bounded() {
    let pairs: Vec<GroundingPair> = (0..6)
        .map(|i| GroundingPair {
            item: i,
            object: 0,
            group: 0,
            voxels: vec![i],
            hit: true,
        })
        .collect();
    let overlaps: Vec<Vec<bool>> = (0..6).map(|i| (0..6).map(|v| v == i).collect()).collect();
    let a = permutation_null(&pairs, &overlaps, 200, 1);
    assert_eq!(a, permutation_null(&pairs, &overlaps, 200, 1));
    // a random permutation has one fixed point on average
    assert!((a - 1.0 / 6.0).abs() < 0.05, "{a}");
}

#[test]
fn evaluation_leaves_parameters_alone() {
    let corpus = small_corpus();
    let m = model();
    let before = m.params.clone();
    evaluate_retrieval(&m, &corpus, Split::Test).unwrap();
    evaluate_temporal(&m, &corpus).unwrap();
    let r = grounding_accuracy(&m, &corpus, &corpus.indices(Split::Test)).unwrap();
    assert!(r.pairs >= 2);
    assert!((0.0..=1.0).contains(&r.accuracy) && (0.0..=1.0).contains(&r.null_rate));
    assert_eq!(m.params, before);
}

#[test]
fn retrieval_on_a_split_uses_corpus_ids() {
    let corpus = small_corpus();
    let (sim, rep) = evaluate_retrieval(&model(), &corpus, Split::Test).unwrap();
    assert_eq!(sim.row_ids, corpus.indices(Split::Test));
    assert_eq!(rep.pool, sim.rows);
    assert!(sim.data.iter().all(|x| (-1.0..=1.0).contains(x)));
}

#[test]
fn heatmap_size_is_matrix_times_scale() {
    let s = SimilarityMatrix::new(3, 5, vec![0.0; 15]).unwrap();
    let (w, h, px) = render_heatmap(&s, 4, -1.0, 1.0);
    assert_eq!((w, h, px.len()), (20, 12, 240));
    assert!(px.iter().all(|&p| p == 128));
}

#[test]
fn summary_omits_missing_parts_and_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let s = Summary {
        grounding: Some(grounding_report(&[], &[])),
        ..Summary::default()
    };
    write_summary(dir.path(), &s).unwrap();
    let a = std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
    assert!(!a.contains("retrieval") && !a.contains("null,") && !a.contains("null\n"));
    write_summary(dir.path(), &s).unwrap();
    assert_eq!(a, std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap());
    assert_eq!(read_summary(&dir.path().join(SUMMARY_FILE)).unwrap(), s);
}

#[test]
fn png_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.png");
    let s = SimilarityMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let (w, h, px) = render_heatmap(&s, 3, 0.0, 1.0);
    write_png(&path, w, h, &px).unwrap();
    let dec = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&path).unwrap()));
    let mut reader = dec.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!((info.width, info.height), (6, 6));
    assert_eq!(&buf[..info.buffer_size()], &px[..]);
    assert!(write_png(&dir.path().join("nope/x.png"), w, h, &px).is_err());
}

#[test]
fn loss_curve_has_fixed_size() {
    let recs: Vec<_> = (0..50)
        .map(|s| crate::trainer::MetricsRecord {
            step: s,
            lr: 0.1,
            loss_total: 10.0 - s as f64 * 0.1,
            loss_t: None,
            loss_g: Some(4.0),
            loss_c: 5.0,
            wallclock: None,
        })
        .collect();
    let (w, h, px) = loss_curve_png(&recs);
    assert_eq!(px.len(), w * h);
    assert!(px.contains(&255) && px.contains(&150) && px.contains(&100));
    assert!(!px.contains(&200));
}
