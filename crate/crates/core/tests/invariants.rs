use eoimap_core::detect::{kl_refine, louvain, merge_refine, modularity, Partition, WeightedGraph};
use eoimap_core::geo::{common_prefix, geohash_decode, geohash_encode, GeohashKey};
use eoimap_core::packet::{ContentType, DataPacket, Location, PacketHeader, PacketPayload};
use eoimap_core::{BBox, IndexConfig, PyramidIndex, TimeRange};
use proptest::prelude::*;

const T0: i64 = 1_496_275_200_000;

fn packet(i: usize, lat: f64, lon: f64, time: i64) -> DataPacket {
    DataPacket {
        id: format!("p{i:05}"),
        header: PacketHeader {
            source: "prop".into(),
            location: Location { lat, lon },
            time,
            content_type: ContentType::Text,
        },
        payload: PacketPayload {
            text: "x".into(),
            ..Default::default()
        },
        term_vector: None,
        event_class: None,
    }
}

fn graph() -> impl Strategy<Value = WeightedGraph<f64>> {
    (1usize..14).prop_flat_map(|n| {
        prop::collection::vec(prop::option::weighted(0.4, 0.05f64..1.0), n * (n - 1) / 2).prop_map(
            move |ws| {
                let mut g = WeightedGraph::with_size(n);
                let mut it = ws.into_iter();
                for u in 0..n {
                    for v in u + 1..n {
                        if let Some(w) = it.next().flatten() {
                            g.add_edge(u, v, w);
                        }
                    }
                }
                g
            },
        )
    })
}

proptest! {
    #[test]
    fn encode_cell_contains_point_and_nests(lat in -90.0f64..90.0, lon in -180.0f64..180.0, p in 1usize..=12) {
        let key = geohash_encode(lat, lon, p).unwrap();
        prop_assert_eq!(key.precision(), p);
        let (bbox, _) = geohash_decode(key.as_str()).unwrap();
        prop_assert!(bbox.contains(lat, lon));
        if let Some(parent) = key.parent() {
            prop_assert!(parent.is_ancestor_of(&key));
            prop_assert!(parent.bbox().contains_bbox(&bbox));
            prop_assert_eq!(geohash_encode(lat, lon, p - 1).unwrap(), parent);
        }
    }

    #[test]
    fn common_prefix_is_an_ancestor_of_all(points in prop::collection::vec((6.0f64..7.0, 3.0f64..4.0), 1..20)) {
        let keys: Vec<GeohashKey> = points.iter().map(|&(a, b)| geohash_encode(a, b, 9).unwrap()).collect();
        if let Some(prefix) = common_prefix(keys.iter()) {
            prop_assert!(keys.iter().all(|k| k.as_str().starts_with(prefix.as_str())));
        }
    }

    #[test]
    fn range_query_matches_a_linear_scan(
        points in prop::collection::vec((6.0f64..6.5, 3.0f64..3.5, 0i64..86_400_000), 0..300),
        corner in (6.0f64..6.5, 3.0f64..3.5),
        extent in (0.0f64..0.5, 0.0f64..0.5),
        window in (0i64..86_400_000, 0i64..86_400_000),
        split in prop::sample::select(vec![2usize, 8, 64]),
    ) {
        let mut index = PyramidIndex::new(IndexConfig { split_threshold: split, ..IndexConfig::default() });
        for (i, &(lat, lon, t)) in points.iter().enumerate() {
            index.insert(packet(i, lat, lon, T0 + t)).unwrap();
        }
        prop_assert_eq!(index.len(), points.len());
        let bbox = BBox::new(corner.0, corner.1, corner.0 + extent.0, corner.1 + extent.1).unwrap();
        let time = TimeRange { from: T0 + window.0.min(window.1), to: T0 + window.0.max(window.1) };
        let want: Vec<String> = points
            .iter()
            .enumerate()
            .filter(|(_, &(lat, lon, t))| bbox.contains(lat, lon) && time.contains(T0 + t))
            .map(|(i, _)| format!("p{i:05}"))
            .collect();
        prop_assert_eq!(index.range_query(&bbox, &time), want);
        for p in index.packets() {
            let leaf = index.leaf_of_packet(&p.id).unwrap();
            prop_assert!(leaf.bbox().contains(p.lat(), p.lon()));
        }
    }

    #[test]
    fn louvain_partition_is_sound(g in graph()) {
        let p = louvain(&g);
        prop_assert_eq!(p.len(), g.len());
        let q = modularity(&g, &p);
        prop_assert!((-0.5..=1.0).contains(&q));
        prop_assert!(q >= modularity(&g, &Partition::single(g.len())) - 1e-12);
        prop_assert!(q >= modularity(&g, &Partition::singletons(g.len())) - 1e-12);
        let mut labels: Vec<usize> = p.assignment().to_vec();
        labels.sort();
        labels.dedup();
        prop_assert_eq!(labels, (0..p.community_count()).collect::<Vec<_>>());
        prop_assert_eq!(louvain(&g), p);
    }

    #[test]
    fn refinement_never_lowers_modularity(g in graph(), seed in prop::collection::vec(0usize..4, 13)) {
        let start = Partition::from_labels(&seed[..g.len()]);
        let q0 = modularity(&g, &start);
        let merged = merge_refine(&g, start);
        let q1 = modularity(&g, &merged);
        prop_assert!(q1 >= q0 - 1e-12);
        prop_assert!(modularity(&g, &kl_refine(&g, merged)) >= q1 - 1e-12);
    }
}
