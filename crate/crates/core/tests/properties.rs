use blockfield::autodiff::Graph;
use blockfield::baseline::{posthoc_quantize, ContinuousField};
use blockfield::constraints::{
    adjacency_loss_value, count_pattern, count_pattern_direct, distribution_loss_value, AdjacencyPattern, DistributionTarget,
    PatternBlock,
};
use blockfield::eval::{r_precision, SimilarityMatrix};
use blockfield::export::{parse_schem_nbt, schem_nbt, SchematicFile};
use blockfield::field::{discretize, gumbel_softmax, sample_grid, sample_gumbel, FieldConfig, FieldParams, GridNoise, QuantMode, QuantizationSchedule};
use blockfield::grid::{cell_center, BlockGrid};
use blockfield::palette::{assemble_block_voxels, BlockPalette, Rgb};
use blockfield::render::{composite, locate, render_block_grid, voxel_lookup, Atlas, Background, Camera, RenderSettings};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid_strategy(max_n: usize, max_m: usize) -> impl Strategy<Value = BlockGrid> {
    (1..=max_n, 1..=max_m).prop_flat_map(|(n, m)| {
        prop::collection::vec(0..=m as u16, n * n * n).prop_map(move |cells| BlockGrid::from_stored(n, m, cells).unwrap())
    })
}

fn permutation(m: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..m).collect::<Vec<_>>()).prop_shuffle()
}

fn pattern_strategy(m: usize, max_k: usize) -> impl Strategy<Value = AdjacencyPattern> {
    (1..=max_k).prop_flat_map(move |k| {
        let entry = (
            [0..k, 0..k, 0..k],
            prop_oneof![Just(PatternBlock::Air), (0..m).prop_map(PatternBlock::Block)],
        );
        (prop::collection::vec(entry, 1..=k * k * k), 0.0f64..5.0).prop_filter_map("duplicate offsets", move |(entries, w)| {
            AdjacencyPattern::new(k, entries, w).ok()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adjacency_loss_distributes_over_weight(
        (grid, p) in grid_strategy(6, 3).prop_flat_map(|g| {
            let (n, m) = (g.size(), g.num_blocks());
            (Just(g), pattern_strategy(m, 3.min(n)))
        })
    ) {
        let count = count_pattern(&grid, &p).unwrap();
        prop_assert_eq!(count, count_pattern_direct(&grid, &p));
        let loss = adjacency_loss_value(&grid, std::slice::from_ref(&p)).unwrap();
        prop_assert!((loss - p.weight * count as f64).abs() <= 1e-12 * loss.abs().max(1.0));
        prop_assert!(loss >= 0.0);
    }

    #[test]
    fn distribution_loss_is_permutation_invariant(
        (grid, perm, targets) in grid_strategy(5, 4).prop_flat_map(|g| {
            let m = g.num_blocks();
            let targets = prop::collection::vec((0..m, 0.0f64..40.0), 1..=m);
            (Just(g), permutation(m), targets)
        })
    ) {
        let target = DistributionTarget::counts(targets);
        let a = distribution_loss_value(&grid, &target).unwrap();
        let b = distribution_loss_value(&grid.relabeled(&perm), &target.relabeled(&perm)).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn straight_through_gradient_equals_soft_gradient(seed in 0u64..1000, rows in 1usize..6, k in 2usize..5, tau in 0.3f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = sample_gumbel(rows * k, &mut rng);
        let noise = sample_gumbel(rows * k, &mut rng);
        let weights: Vec<f64> = sample_gumbel(rows * k, &mut rng);
        let grad = |hard: bool| {
            let mut g = Graph::new();
            let x = g.leaf(&blockfield::autodiff::Tensor::new(vec![rows, k], logits.clone()).unwrap().with_grad());
            let y = gumbel_softmax(&mut g, x, tau, hard, &noise).unwrap();
            if hard {
                for row in g.value(y).chunks(k) {
                    assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
                    assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), k - 1);
                }
            }
            let w = g.constant(vec![rows, k], weights.clone()).unwrap();
            let p = g.mul(y, w).unwrap();
            let s = g.sum(p);
            g.backward(s).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        prop_assert_eq!(grad(true), grad(false));
    }

    #[test]
    fn nearest_voxel_lookup_ignores_position_within_subvoxel(
        n in 1usize..5,
        cell in prop::array::uniform3(0usize..64),
        sub in prop::array::uniform3(0usize..16),
        a in prop::array::uniform3(0.01f64..0.99),
        b in prop::array::uniform3(0.01f64..0.99),
        seed in 0u64..1000,
    ) {
        let palette = BlockPalette::builtin_subset(&["stone", "log_oak", "gold_block"]).unwrap();
        let atlas = Atlas::new(&palette);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c: Vec<f64> = sample_gumbel(n * n * n * 3, &mut rng).iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let point = |f: [f64; 3]| -> [f64; 3] {
            std::array::from_fn(|d| ((cell[d] % n) as f64 + (sub[d] as f64 + f[d]) / 16.0) / n as f64)
        };
        let (p, q) = (point(a), point(b));
        prop_assert_eq!(locate(p, n), locate(q, n));
        prop_assert_eq!(voxel_lookup(p, &c, n, &atlas, 40.0), voxel_lookup(q, &c, n, &atlas, 40.0));
    }

    #[test]
    fn compositing_weights_and_transmittance_sum_to_one(taus in prop::collection::vec(0.0f64..5.0, 0..40)) {
        let settings = RenderSettings::default();
        let out = composite(taus.iter().enumerate().map(|(i, &t)| (settings.sample_t(i), [0.5; 3], t)), [1.0; 3], &settings);
        prop_assert!((out.weight_sum + out.transmittance - 1.0).abs() < 1e-12);
    }

    #[test]
    fn schematic_round_trips(grid in grid_strategy(7, 5)) {
        let palette = BlockPalette::builtin();
        let m = grid.num_blocks();
        let names = palette.names()[..m].to_vec();
        let ids: Vec<String> = palette.blocks()[..m].iter().map(|b| b.game_id.clone()).collect();
        let file = SchematicFile::new(grid.clone(), names).unwrap();
        let bytes = file.to_bytes().unwrap();
        prop_assert_eq!(SchematicFile::from_bytes(&bytes).unwrap(), file);
        let back = parse_schem_nbt(&schem_nbt(&grid, &ids).unwrap()).unwrap().to_grid(&ids).unwrap();
        prop_assert_eq!(back, grid);
    }

    #[test]
    fn renaming_blocks_never_changes_ids(grid in grid_strategy(4, 3), suffix in "[a-z]{1,8}") {
        let names: Vec<String> = (0..grid.num_blocks()).map(|i| format!("block_{i}")).collect();
        let renamed: Vec<String> = names.iter().map(|n| format!("{n}_{suffix}")).collect();
        let a = SchematicFile::new(grid.clone(), names).unwrap().to_bytes().unwrap();
        let b = SchematicFile::new(grid.clone(), renamed).unwrap().to_bytes().unwrap();
        let ga = SchematicFile::from_bytes(&a).unwrap().grid;
        let gb = SchematicFile::from_bytes(&b).unwrap().grid;
        prop_assert_eq!(ga.stored(), gb.stored());
        prop_assert_eq!(ga.stored(), grid.stored());
    }

    #[test]
    fn posthoc_quantize_is_scale_invariant(seed in 0u64..1000, scale in 0.01f64..100.0, s in 0.5f64..20.0) {
        let palette = BlockPalette::builtin();
        let field = noise_field(seed);
        let scaled = |p: [f64; 3]| {
            let (c, sigma) = field(p);
            (c, sigma * scale)
        };
        let a = posthoc_quantize(&field, &palette, 4, s);
        let b = posthoc_quantize(&scaled, &palette, 4, s * scale);
        // Products can round across the threshold only at exact ties.
        let ties = (0..64).filter(|&i| {
            let (x, y, z) = (i / 16, (i / 4) % 4, i % 4);
            let sigma = field([cell_center(x, 4), cell_center(y, 4), cell_center(z, 4)]).1;
            ((sigma * scale) - s * scale).abs() <= 1e-9 * s * scale
        }).count();
        if ties == 0 {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn posthoc_assignment_is_an_argmin(seed in 0u64..1000) {
        let palette = BlockPalette::builtin();
        let means = palette.mean_colors();
        let field = noise_field(seed);
        let grid = posthoc_quantize(&field, &palette, 4, 10.0);
        let d = |a: Rgb, b: Rgb| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    if let Some(b) = grid.get(x, y, z) {
                        let rgb = field.query([cell_center(x, 4), cell_center(y, 4), cell_center(z, 4)]).0;
                        prop_assert!(means.iter().all(|&m| d(rgb, means[b]) <= d(rgb, m)));
                    }
                }
            }
        }
    }

    #[test]
    fn r_precision_is_invariant_under_monotone_transforms(
        (scores, which) in (2usize..6).prop_flat_map(|c| (prop::collection::vec(prop::collection::vec(-3.0f64..3.0, c), c), 0usize..3))
    ) {
        let c = scores.len();
        let m = SimilarityMatrix { captions: (0..c).map(|i| i.to_string()).collect(), scores: scores.clone(), true_caption: None };
        let f = |v: f64| match which {
            0 => v.exp(),
            1 => 3.0 * v + 1.0,
            _ => v.atan(),
        };
        let t = SimilarityMatrix { scores: scores.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect(), ..m.clone() };
        prop_assert_eq!(r_precision(&m).unwrap(), r_precision(&t).unwrap());
    }

    #[test]
    fn sample_grid_is_deterministic_for_fixed_noise(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = FieldParams::new(FieldConfig::small(2), &mut rng);
        let noise = GridNoise::sample(27, 2, &mut rng);
        let schedule = QuantizationSchedule::new(QuantMode::Anneal, QuantMode::Anneal);
        let run = || {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let s = sample_grid(&mut g, &params, &bound, 3, &schedule, 3, 10, &noise).unwrap();
            g.value(s.c).to_vec()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn low_air_bias_discretizes_to_all_air(seed in 0u64..200, eps in 0.01f64..5.0) {
        let mut params = FieldParams::new(FieldConfig::small(2), &mut ChaCha8Rng::seed_from_u64(seed));
        // Zero the air head's last weights so σ is exactly exp(bias).
        let air_tensors = 2 * (params.config.air_hidden.len() + 1);
        let mut tensors = params.tensors_mut();
        tensors[air_tensors - 2].data_mut().iter_mut().for_each(|w| *w = 0.0);
        tensors[air_tensors - 1].data_mut()[0] = (10.0 - eps).ln();
        prop_assert_eq!(discretize(&params, 4).solid_cells(), 0);
    }

    #[test]
    fn rendering_is_invariant_under_palette_reordering(
        (grid, order) in grid_strategy(4, 3).prop_flat_map(|g| { let m = g.num_blocks(); (Just(g), permutation(m)) }),
        az in 0.0f64..360.0,
    ) {
        let base = BlockPalette::builtin_subset(&["stone", "log_oak", "gold_block"]).unwrap().subset(
            &["stone", "log_oak", "gold_block"][..grid.num_blocks()]).unwrap();
        let permuted = base.reordered(&order).unwrap();
        let mut inverse = vec![0; order.len()];
        for (i, &o) in order.iter().enumerate() {
            inverse[o] = i;
        }
        let cam = Camera::orbit(az, 20.0, 12, 12);
        let settings = RenderSettings::for_grid(grid.size());
        let bg = Background::Constant([0.2, 0.3, 0.4]);
        let a = render_block_grid(&cam, &grid, &base, bg, &settings).unwrap();
        let b = render_block_grid(&cam, &grid.relabeled(&inverse), &permuted, bg, &settings).unwrap();
        prop_assert_eq!(a.max_abs_diff(&b), 0.0);
    }
}

/// Piecewise-constant pseudo-random field over a 4³ lattice.
fn noise_field(seed: u64) -> impl Fn([f64; 3]) -> (Rgb, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<(Rgb, f64)> = (0..64)
        .map(|_| {
            let v = sample_gumbel(4, &mut rng);
            let unit = |x: f64| 1.0 / (1.0 + (-x).exp());
            ([unit(v[0]), unit(v[1]), unit(v[2])], 20.0 * unit(v[3]))
        })
        .collect();
    move |p: [f64; 3]| {
        let i = |x: f64| ((x * 4.0) as usize).min(3);
        values[(i(p[0]) * 4 + i(p[1])) * 4 + i(p[2])]
    }
}

#[test]
fn voxel_assembly_is_deterministic_and_in_range() {
    for block in BlockPalette::builtin().blocks() {
        let a = assemble_block_voxels(block);
        let b = assemble_block_voxels(block);
        assert_eq!(
            a.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(a.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }
}
