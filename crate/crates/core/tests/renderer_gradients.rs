mod common;

use common::renderer_fd;

#[test]
fn analytic_partials_match_central_differences() {
    let r = renderer_fd(6, 20);
    println!(
        "compared {} partials (largest {:e}), excluded {} at blend-structure changes, worst abs {:e}, worst rel above the floor {:e}",
        r.compared, r.largest_partial, r.excluded, r.worst_abs, r.worst_rel
    );
    assert!(r.failures.is_empty(), "{}", r.failures.join("\n"));
    assert!(r.compared > 10 * r.excluded);
}
