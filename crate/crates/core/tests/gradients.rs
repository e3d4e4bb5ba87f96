mod common;

use common::{gradient_check, random_kd_case};
use skipwise::graph_ir::validate;

#[test]
fn kd_gradients_match_central_differences() {
    let mut worst = 0.0f64;
    let (mut checked, mut skipped) = (0, 0);
    for seed in 0..100 {
        let case = random_kd_case(seed);
        assert!(validate(&case.graph).is_empty(), "seed {seed}: {:?}", validate(&case.graph));
        let r = gradient_check(&case);
        assert!(r.max_rel_error < 1e-5, "seed {seed} ({}): relative error {:e}", case.graph.name(), r.max_rel_error);
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
        skipped += r.skipped_at_kinks;
    }
    println!("worst relative error {worst:e} over {checked} coordinates, {skipped} at kinks");
    assert!(skipped * 100 < checked, "too many coordinates at kinks: {skipped} of {checked}");
}
