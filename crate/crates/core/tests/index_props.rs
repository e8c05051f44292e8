use std::collections::HashSet;
use std::fs;
use std::time::Instant;

use mvann::{
    exact_topk, generate_synthetic, recall, write_store, Error, IndexConfig, IoMode, MultiViewIndex, RerankPlan,
    SearchParams, VectorDataset,
};
use proptest::prelude::*;

fn dataset(n: usize, d: usize, seed: u64) -> VectorDataset {
    generate_synthetic(n, d, 10, seed).unwrap()
}

fn small_config() -> IndexConfig {
    IndexConfig { n_cluster: 64, m: 4, l: 64, kmeans_iters: 15, ..Default::default() }
}

#[test]
fn degenerate_config_is_exact() {
    let ds = dataset(100, 8, 1);
    let queries = dataset(30, 8, 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = IndexConfig { n_cluster: 100, m: 8, l: 100, ..Default::default() };
    let index = MultiViewIndex::build(&ds, cfg, dir.path().join("fv"), IoMode::Direct).unwrap();
    let params = SearchParams { k: 10, r: 10, nscan: 100, ef_search: 100 };
    for q in queries.rows().chain(ds.rows().take(10)) {
        let truth = exact_topk(&ds, q, 10).unwrap();
        assert_eq!(index.search(q, &params).unwrap().neighbors, truth);
        let preview = index.search_preview(q, &params).unwrap().neighbors;
        let ids: Vec<u32> = preview.iter().map(|n| n.id).collect();
        let truth_ids: Vec<u32> = truth.iter().map(|n| n.id).collect();
        assert_eq!(recall(&ids, &truth_ids, 10).unwrap(), 1.0);
    }
}

#[test]
fn serialize_roundtrip_answers_identically() {
    let ds = dataset(4000, 16, 3);
    let queries = dataset(100, 16, 4);
    let dir = tempfile::tempdir().unwrap();
    let index = MultiViewIndex::build(&ds, small_config(), dir.path().join("fv.bin"), IoMode::Direct).unwrap();
    let path = dir.path().join("index.zoom");
    index.serialize(&path).unwrap();
    assert!(!dir.path().join("index.zoom.partial").exists());
    let params = SearchParams { k: 5, r: 40, nscan: 8, ef_search: 32 };
    for mode in [IoMode::Direct, IoMode::Buffered] {
        let loaded = MultiViewIndex::deserialize(&path, mode).unwrap();
        assert_eq!(loaded.config(), index.config());
        assert_eq!(loaded.routing(), index.routing());
        assert_eq!(loaded.lists(), index.lists());
        assert_eq!(loaded.codebook(), index.codebook());
        for q in queries.rows() {
            assert_eq!(loaded.search(q, &params).unwrap().neighbors, index.search(q, &params).unwrap().neighbors);
        }
    }
}

#[test]
fn builds_are_byte_identical() {
    let ds = dataset(3000, 8, 5);
    let mut blobs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let index = MultiViewIndex::build(&ds, small_config(), dir.path().join("fv.bin"), IoMode::Buffered).unwrap();
        index.serialize(dir.path().join("i.zoom")).unwrap();
        blobs.push(fs::read(dir.path().join("i.zoom")).unwrap());
    }
    assert_eq!(blobs[0], blobs[1]);
}

#[test]
fn damaged_containers_are_format_errors() {
    let ds = dataset(2000, 8, 6);
    let dir = tempfile::tempdir().unwrap();
    let index = MultiViewIndex::build(&ds, small_config(), dir.path().join("fv.bin"), IoMode::Buffered).unwrap();
    let path = dir.path().join("i.zoom");
    index.serialize(&path).unwrap();
    let good = fs::read(&path).unwrap();
    let bad = dir.path().join("bad.zoom");

    let mut magic = good.clone();
    magic[1] ^= 0xff;
    fs::write(&bad, &magic).unwrap();
    assert!(matches!(MultiViewIndex::deserialize(&bad, IoMode::Buffered), Err(Error::Format { offset: 0, .. })));

    let mut version = good.clone();
    version[4] = 9;
    fs::write(&bad, &version).unwrap();
    assert!(matches!(MultiViewIndex::deserialize(&bad, IoMode::Buffered), Err(Error::Format { .. })));

    for cut in [3, 20, good.len() / 2, good.len() - 1] {
        fs::write(&bad, &good[..cut]).unwrap();
        assert!(
            matches!(MultiViewIndex::deserialize(&bad, IoMode::Buffered), Err(Error::Format { .. })),
            "cut at {cut}"
        );
    }

    // the recorded checksum catches a modified full-view file
    let fv = dir.path().join("fv.bin");
    let mut bytes = fs::read(&fv).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&fv, &bytes).unwrap();
    assert!(matches!(MultiViewIndex::deserialize(&path, IoMode::Buffered), Err(Error::Format { .. })));
}

#[test]
fn serialized_size_tracks_memory_model() {
    let ds = dataset(20_000, 32, 7);
    let dir = tempfile::tempdir().unwrap();
    let cfg = IndexConfig { n_cluster: 200, m: 8, l: 256, kmeans_iters: 10, ..Default::default() };
    let index = MultiViewIndex::build(&ds, cfg, dir.path().join("fv.bin"), IoMode::Buffered).unwrap();
    index.serialize(dir.path().join("i.zoom")).unwrap();
    let size = fs::metadata(dir.path().join("i.zoom")).unwrap().len() as f64;
    let model = index.memory_bytes() as f64;
    assert!((size - model).abs() <= 0.1 * model, "serialized {size} vs model {model}");
}

#[test]
fn search_contracts() {
    let ds = dataset(5000, 16, 8);
    let queries = dataset(200, 16, 9);
    let dir = tempfile::tempdir().unwrap();
    let index = MultiViewIndex::build(&ds, small_config(), dir.path().join("fv.bin"), IoMode::Direct).unwrap();
    index.check_invariants().unwrap();
    let params = SearchParams { k: 10, r: 30, nscan: 4, ef_search: 16 };
    for (i, q) in queries.rows().enumerate() {
        let truth: Vec<u32> = exact_topk(&ds, q, 10).unwrap().iter().map(|n| n.id).collect();
        let start = Instant::now();
        let full = index.search(q, &params).unwrap();
        let elapsed_us = start.elapsed().as_secs_f64() * 1e6;
        assert!(full.timings.total_us() <= elapsed_us);
        let preview = index.search_preview(q, &params).unwrap();
        let ids = |r: &mvann::QueryResult| r.neighbors.iter().map(|n| n.id).collect::<Vec<_>>();
        // exact rerank of a superset cannot lose a true neighbor the preview kept
        assert!(recall(&ids(&full), &truth, 10).unwrap() >= recall(&ids(&preview), &truth, 10).unwrap());
        assert!(full.neighbors.windows(2).all(|w| w[0].dist <= w[1].dist));
        assert_eq!(ids(&full).into_iter().collect::<HashSet<_>>().len(), 10);

        // self query: found with distance 0 whenever its cluster is scanned
        let v = (i * 17) % ds.n();
        let own = index.clusters().assignments()[v];
        let routed = index.routing().route(index.clusters(), ds.row(v), params.nscan, params.ef_search).unwrap();
        let hit = index.search(ds.row(v), &params).unwrap();
        if routed.iter().any(|&(c, _)| c == own) {
            assert!(hit.neighbors.iter().any(|n| n.id == v as u32 && n.dist == 0.0));
        }
    }
}

#[test]
fn unfiltered_rerank_is_exact_sort_of_scanned() {
    let ds = dataset(3000, 8, 10);
    let dir = tempfile::tempdir().unwrap();
    let index = MultiViewIndex::build(&ds, small_config(), dir.path().join("fv.bin"), IoMode::Direct).unwrap();
    let q = dataset(1, 8, 11).row(0).to_vec();
    let routed = index.routing().route(index.clusters(), &q, 3, 16).unwrap();
    let scanned: Vec<usize> =
        routed.iter().flat_map(|&(c, _)| index.lists().list(c as usize).ids.clone()).map(|i| i as usize).collect();
    let n = scanned.len();
    let hits = index.search(&q, &SearchParams { k: n, r: n, nscan: 3, ef_search: 16 }).unwrap();
    let sub = ds.subset(&scanned).unwrap();
    let expected: Vec<(u32, f32)> =
        exact_topk(&sub, &q, n).unwrap().iter().map(|nb| (scanned[nb.id as usize] as u32, nb.dist)).collect();
    let got: Vec<(u32, f32)> = hits.neighbors.iter().map(|nb| (nb.id, nb.dist)).collect();
    assert_eq!(got, expected);
}

#[test]
fn index_is_shareable_across_threads() {
    fn assert_sync<T: Send + Sync>() {}
    assert_sync::<MultiViewIndex>();
    let ds = dataset(2000, 8, 12);
    let dir = tempfile::tempdir().unwrap();
    let index = MultiViewIndex::build(&ds, small_config(), dir.path().join("fv.bin"), IoMode::Direct).unwrap();
    let params = SearchParams { k: 3, r: 20, nscan: 4, ef_search: 16 };
    let serial: Vec<_> = (0..40).map(|i| index.search(ds.row(i), &params).unwrap().neighbors).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..4)
            .map(|t| {
                let (index, ds) = (&index, &ds);
                s.spawn(move || (t..40).step_by(4).map(|i| (i, index.search(ds.row(i), &params).unwrap().neighbors)).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, got) in h.join().unwrap() {
                assert_eq!(got, serial[i]);
            }
        }
    });
}

#[test]
fn rerank_batch_setting_does_not_change_answers() {
    let ds = dataset(2000, 8, 13);
    let dir = tempfile::tempdir().unwrap();
    let index = MultiViewIndex::build(&ds, small_config(), dir.path().join("fv.bin"), IoMode::Direct).unwrap();
    let params = SearchParams { k: 5, r: 50, nscan: 6, ef_search: 16 };
    let q = ds.row(77);
    let base = index.search(q, &params).unwrap().neighbors;
    for b in [1, 3, 16, 50] {
        index.set_rerank_batch(b);
        assert_eq!(index.search(q, &params).unwrap().neighbors, base);
    }
    let plan = index.autotune_rerank(50).unwrap();
    assert!(plan.capacity() >= 50);
    assert_eq!(index.search(q, &params).unwrap().neighbors, base);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn store_reads_and_reranks_exactly(
        n in 1usize..600,
        d in 1usize..40,
        seed in any::<u64>(),
        raw_ids in prop::collection::vec(any::<u32>(), 1..120),
        batch in 1usize..40,
    ) {
        let ds = generate_synthetic(n, d, 3, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let direct = write_store(&ds, dir.path().join("fv"), IoMode::Direct).unwrap();
        let buffered = mvann::FullViewStore::open(dir.path().join("fv"), IoMode::Buffered).unwrap();
        let ids: Vec<u32> = raw_ids.iter().map(|x| x % n as u32).collect();
        let plan = RerankPlan::covering(batch, ids.len());
        for store in [&direct, &buffered] {
            let mut got = store.read_batch(&ids, plan).unwrap();
            prop_assert_eq!(got.len(), ids.len());
            got.sort_by_key(|a| a.0);
            let mut want: Vec<(u32, Vec<f32>)> = ids.iter().map(|&i| (i, ds.row(i as usize).to_vec())).collect();
            want.sort_by_key(|a| a.0);
            prop_assert_eq!(got, want);
        }

        // rerank equals exact search over the candidate sub-dataset
        let unique: Vec<u32> = ids.iter().copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let k = unique.len().min(7);
        let q = ds.row((seed % n as u64) as usize).to_vec();
        let sub = ds.subset(&unique.iter().map(|&i| i as usize).collect::<Vec<_>>()).unwrap();
        let expected: Vec<(u32, f32)> = exact_topk(&sub, &q, k).unwrap().iter().map(|nb| (unique[nb.id as usize], nb.dist)).collect();
        let plan = RerankPlan::covering(batch, unique.len());
        for store in [&direct, &buffered] {
            let got: Vec<(u32, f32)> = store.rerank(&q, &unique, k, plan).unwrap().iter().map(|nb| (nb.id, nb.dist)).collect();
            prop_assert_eq!(&got, &expected);
        }
    }
}
