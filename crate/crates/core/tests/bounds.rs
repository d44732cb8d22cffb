use leapts::bounds::{
    bound_direct, bound_leapts_optimal, bound_leapts_optimal_dp, bound_recursive, composition_from_mask, random_instances,
    write_bound_csv, BoundInstance, BoundRow,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Minimum of the mixed bound over a dense alpha grid and every composition,
/// found independently of the library's endpoint argument.
fn grid_oracle(inst: &BoundInstance) -> f64 {
    let mut alphas: Vec<f64> = (1..1000).map(|i| i as f64 * 1e-3).collect();
    // the open interval's endpoints are approached, never reached
    alphas.extend([1e-9, 1.0 - 1e-9]);
    let p = inst.horizon;
    let mut best = f64::INFINITY;
    for mask in 0..(1u32 << (p - 1)) {
        // build the composition by hand from cut positions
        let mut parts = Vec::new();
        let mut start = 0;
        for cut in 1..p {
            if mask >> (cut - 1) & 1 == 1 {
                parts.push(cut - start);
                start = cut;
            }
        }
        parts.push(p - start);
        let mut tau = 0;
        let mut sched = 0.0;
        for &len in &parts {
            tau += len;
            sched += inst.lambda.powf((p - tau) as f64) * inst.a * (len as f64).powf(inst.p);
        }
        let direct = inst.a * (p as f64).powf(inst.p);
        for &a in &alphas {
            best = best.min((1.0 - a) * direct + a * sched);
        }
    }
    best
}

#[test]
fn dense_grid_agrees_with_endpoint_argument() {
    let inst = BoundInstance::new(1.0001, 1.0, 1.5, 6).unwrap();
    let opt = bound_leapts_optimal(&inst).unwrap();
    assert!((opt.value - grid_oracle(&inst)).abs() < 1e-6);
}

#[test]
fn random_instances_respect_the_bound_ordering() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for inst in random_instances(&mut rng, 200, 2, 10) {
        let opt = bound_leapts_optimal(&inst).unwrap();
        assert!(opt.value <= bound_direct(&inst).min(bound_recursive(&inst)) + 1e-9);
        let dp = bound_leapts_optimal_dp(&inst).unwrap();
        assert!((dp.value - opt.value).abs() <= 1e-9 * opt.value.max(1.0));
        if inst.horizon <= 7 {
            assert!((opt.value - grid_oracle(&inst)).abs() <= 1e-6 * opt.value.max(1.0));
        }
    }
}

#[test]
fn attainment_flag_follows_the_winning_endpoint() {
    let inst = BoundInstance::new(2.0, 1.0, 2.0, 4).unwrap();
    let opt = bound_leapts_optimal(&inst).unwrap();
    assert!(!opt.attained);
    assert_eq!(opt.value, inst.mixed(1.0, &opt.partition).unwrap());
    assert!(inst.mixed(0.999, &opt.partition).unwrap() > opt.value);
}

#[test]
fn large_horizons_need_the_dp_route() {
    let inst = BoundInstance::new(1.1, 1.0, 1.2, 64).unwrap();
    assert!(bound_leapts_optimal(&inst).is_err());
    let dp = bound_leapts_optimal_dp(&inst).unwrap();
    assert_eq!(dp.partition.iter().sum::<usize>(), 64);
    assert!(dp.value <= bound_direct(&inst));
}

#[test]
fn compositions_are_all_distinct() {
    let mut seen: Vec<Vec<usize>> = (0..(1u32 << 9)).map(|m| composition_from_mask(m, 10)).collect();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 512);
}

#[test]
fn csv_has_expected_columns() {
    let rows = vec![BoundRow::evaluate(&BoundInstance::new(2.0, 1.0, 2.0, 4).unwrap()).unwrap()];
    let mut buf = Vec::new();
    write_bound_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "lambda,a,p,P,b_dir,b_rec,b_star,best_partition");
    assert_eq!(lines.next().unwrap(), "2.0,1.0,2.0,4,16.0,15.0,15.0,1-1-1-1");
}
