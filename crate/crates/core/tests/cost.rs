use aop_core::cost::{aop_cost, default_grid, moe_cost, verify_theorem, CostModel};
use proptest::prelude::*;

proptest! {
    #[test]
    fn parameter_mixing_is_cheaper(r in 2u64..64, t in 2u64..512, d in 1u64..1024, n in 1u64..1024) {
        let m = CostModel::new(r, t, d, n).unwrap();
        prop_assert!(aop_cost(&m) < moe_cost(&m));
        // brute force: count the multiply-adds of both procedures directly
        let mut moe = 0u64;
        for _expert in 0..r {
            moe += t * d * n; // apply one expert to the sequence
            moe += t * n; // add its output into the sum
        }
        let aop = r * d * n + t * d * n;
        prop_assert_eq!(moe, moe_cost(&m));
        prop_assert_eq!(aop, aop_cost(&m));
    }
}

#[test]
fn default_grid_has_no_violations() {
    let grid = default_grid();
    assert_eq!(grid.len(), 12 * 63 * 3 * 3);
    let report = verify_theorem(&grid);
    assert!(report.holds());
    assert_eq!(report.checked(), grid.len());
}
