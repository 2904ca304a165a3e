use catpress::arch::{BlockKind, GeneratorArch, NormKind, NormSite, Shape, TemplateOptions};
use catpress::ka::{ka, ka_gram, FeatureMatrix};
use catpress::macs::{arch_macs, output_shape};
use catpress::prune::{candidate_thresholds, prune, pruned_macs, search_threshold, PruneBudget};
use catpress::verify::{oracle_threshold, random_small_arch};
use catpress::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn template(base: usize, blocks: usize, incres: bool, batch: bool, size: usize) -> GeneratorArch {
    let kind = if incres { BlockKind::IncRes } else { BlockKind::Plain };
    let norm = if batch { NormKind::Batch } else { NormKind::Instance };
    TemplateOptions::new(base, blocks, 3, 3, kind)
        .with_norm(norm)
        .with_size(size, size)
        .build()
        .unwrap()
}

fn small_arch(seed: u64) -> GeneratorArch {
    random_small_arch(&mut ChaCha8Rng::seed_from_u64(seed))
}

fn features(rows: usize, cols: usize, data: Vec<f32>) -> FeatureMatrix {
    FeatureMatrix::new(rows, cols, data, "f")
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = FeatureMatrix> {
    prop::collection::vec(-1.0f32..1.0, rows * cols)
        .prop_filter("not all zero", |v| v.iter().any(|x| x.abs() > 1e-3))
        .prop_map(move |v| features(rows, cols, v))
}

fn matrix_pair() -> impl Strategy<Value = (FeatureMatrix, FeatureMatrix)> {
    (1usize..8, 1usize..24, 1usize..24).prop_flat_map(|(n, p, q)| (matrix(n, p), matrix(n, q)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn templates_validate_and_round_trip(
        base in 6usize..=64,
        blocks in 1usize..=16,
        incres: bool,
        batch: bool,
        seed: u64,
    ) {
        let mut arch = template(base, blocks, incres, batch, 16);
        prop_assert!(arch.validate().is_ok());
        arch.randomize_scales(&mut ChaCha8Rng::seed_from_u64(seed), 0.5, 0.3);
        let text = arch.to_json();
        let back = GeneratorArch::from_json(&text).unwrap();
        prop_assert_eq!(&back, &arch);
        prop_assert_eq!(back.to_json(), text);
    }

    #[test]
    fn templates_preserve_spatial_size(base in 6usize..=12, blocks in 1usize..=3, incres: bool, quarter in 2usize..=16) {
        let size = 4 * quarter;
        let arch = template(base, blocks, incres, false, size);
        prop_assert_eq!(output_shape(&arch, arch.input()).unwrap(), Shape::new(3, size, size));
    }

    #[test]
    fn ka_stays_in_range_and_is_symmetric((x, y) in matrix_pair()) {
        let a = ka(&x, &y).unwrap();
        prop_assert!((0.0..=1.0 + 1e-6).contains(&a), "{}", a);
        prop_assert!((a - ka(&y, &x).unwrap()).abs() <= 1e-6);
        prop_assert!((ka(&x, &x).unwrap() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn ka_ignores_isotropic_scaling((x, y) in matrix_pair(), alpha in 0.01f32..100.0, beta in 0.01f32..100.0) {
        let scale = |m: &FeatureMatrix, s: f32| features(m.rows, m.cols, m.data.iter().map(|v| v * s).collect());
        let a = ka(&x, &y).unwrap();
        prop_assert!((ka(&scale(&x, alpha), &scale(&y, beta)).unwrap() - a).abs() <= 1e-5);
    }

    #[test]
    fn gram_route_matches_direct_route((x, y) in matrix_pair()) {
        let a = ka(&x, &y).unwrap() as f64;
        let g = ka_gram(&x, &y).unwrap() as f64;
        prop_assert!((a - g).abs() <= 1e-5 * a.abs().max(1e-6));
    }

    #[test]
    fn search_matches_the_linear_scan(seed: u64, floor in 1usize..=4, fraction in 0.02f64..1.1) {
        let arch = small_arch(seed);
        let full = arch_macs(&arch, arch.input()).unwrap().total;
        let target = ((full as f64 * fraction) as u64).max(1);
        let budget = PruneBudget::new(target, floor, arch.input()).unwrap();
        match (search_threshold(&arch, &budget), oracle_threshold(&arch, &budget)) {
            (Ok(s), Ok(o)) => {
                prop_assert_eq!(s.threshold.to_bits(), o.to_bits());
                prop_assert!(pruned_macs(&arch, s.threshold, floor, arch.input()).unwrap() <= target);
            }
            (Err(Error::BudgetInfeasible { .. }), Err(Error::BudgetInfeasible { .. })) => {}
            (s, o) => prop_assert!(false, "search {:?} vs oracle {:?}", s.map(|s| s.threshold), o),
        }
    }

    #[test]
    fn pruned_cost_never_rises_with_the_threshold(seed: u64, floor in 1usize..=4) {
        let arch = small_arch(seed);
        let mut last = u64::MAX;
        for tau in candidate_thresholds(&arch).unwrap() {
            let m = pruned_macs(&arch, tau, floor, arch.input()).unwrap();
            prop_assert!(m <= last);
            last = m;
        }
    }

    #[test]
    fn prune_respects_budget_floor_and_is_idempotent(seed: u64, floor in 1usize..=4, fraction in 0.3f64..1.0) {
        let arch = small_arch(seed);
        let full = arch_macs(&arch, arch.input()).unwrap().total;
        let budget = PruneBudget::new((full as f64 * fraction) as u64 + 1, floor, arch.input()).unwrap();
        let r = match prune(&arch, &budget) {
            Ok(r) => r,
            Err(Error::BudgetInfeasible { .. }) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert!(r.achieved_macs <= budget.target_macs);
        prop_assert!(r.arch.validate().is_ok());
        let before: Vec<usize> = arch
            .prunable_norms()
            .iter()
            .filter(|(_, n)| n.site == NormSite::Outer)
            .map(|(_, n)| n.gamma.len())
            .collect();
        let after: Vec<usize> = r
            .arch
            .prunable_norms()
            .iter()
            .filter(|(_, n)| n.site == NormSite::Outer)
            .map(|(_, n)| n.gamma.len())
            .collect();
        prop_assert_eq!(before.len(), after.len());
        for (b, a) in before.iter().zip(&after) {
            prop_assert!(*a >= floor.min(*b), "{} channels left of {}", a, b);
        }
        let again = prune(&r.arch, &budget).unwrap();
        prop_assert_eq!(again.pruned_channel_count, 0);
        prop_assert_eq!(again.removed_branch_count, 0);
        prop_assert_eq!(again.achieved_macs, r.achieved_macs);
    }
}
