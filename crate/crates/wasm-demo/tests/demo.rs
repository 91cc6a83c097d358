use anchorattn_wasm::{attention_maps, fit_trajectory, flop_curves};

fn cloud() -> Vec<f64> {
    // Three tight groups of points.
    let mut xy = Vec::new();
    for (cx, cy) in [(4.0, 0.0), (-2.0, 3.5), (-2.0, -3.5)] {
        for k in 0..5 {
            let t = k as f64;
            xy.extend_from_slice(&[cx + 0.1 * t.sin(), cy + 0.1 * t.cos()]);
        }
    }
    xy
}

#[test]
fn maps_are_row_stochastic_and_symmetric_where_expected() {
    let maps = attention_maps(&cloud(), 3, 3, 1).unwrap();
    let n = maps.n;
    assert_eq!(n, 15);
    assert_eq!(maps.anchors.len(), 6);
    for i in 0..n {
        let v: f64 = maps.vanilla[i * n..(i + 1) * n].iter().sum();
        let a: f64 = maps.anchor[i * n..(i + 1) * n].iter().sum();
        assert!((v - 1.0).abs() < 1e-12 && (a - 1.0).abs() < 1e-12);
        for j in 0..n {
            assert!((maps.anchor[i * n + j] - maps.anchor[j * n + i]).abs() < 1e-12);
        }
    }
    assert!(maps.max_gap.is_finite());
}

#[test]
fn bad_point_lists_are_rejected() {
    assert!(attention_maps(&[1.0, 2.0, 3.0], 2, 0, 0).is_err());
    assert!(attention_maps(&[], 2, 0, 0).is_err());
    assert!(attention_maps(&[1.0, 2.0], 0, 0, 0).is_err());
}

#[test]
fn trajectory_shapes_and_endpoint() {
    let xy = cloud();
    let t = fit_trajectory(&xy, 3, 10, 2).unwrap();
    assert_eq!(t.positions.len(), 11 * 3 * 2);
    assert_eq!(t.objective.len(), 11);
    let direct = anchorattn::anchor::fit_anchors(
        &anchorattn::Matrix::new(15, 2, xy.clone()).unwrap(),
        anchorattn_wasm::anchors_for(&anchorattn::Matrix::new(15, 2, xy).unwrap(), 3, 0, 2)
            .unwrap(),
        10,
    )
    .unwrap();
    assert_eq!(&t.positions[60..], direct.anchors.w_s.data());
    assert_eq!(t.objective, direct.objective);
}

#[test]
fn flop_curves_cross_over() {
    let c = flop_curves(4, 16, 4096, 40);
    assert_eq!(c.ns[0], 8.0);
    assert_eq!(*c.ns.last().unwrap(), 4096.0);
    let x = c.crossover.unwrap() as u64;
    assert!(anchorattn::bench::flops::anchor_flops(x, 4, 16) < anchorattn::vanilla_flops(x, 16));
    assert!(
        anchorattn::bench::flops::anchor_flops(x - 1, 4, 16)
            >= anchorattn::vanilla_flops(x - 1, 16)
    );
    // Exact, not limited to the sampled grid.
    assert_eq!(
        flop_curves(30, 64, 8192, 10).crossover,
        flop_curves(30, 64, 8192, 200).crossover
    );
    assert_eq!(c.vanilla[0], anchorattn::vanilla_flops(8, 16) as f64);
    assert!(flop_curves(100_000, 1, 64, 5).crossover.is_none());
}
