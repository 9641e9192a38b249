use occtrack_bench::{model, patch, sequence};

#[test]
fn patch_holds_the_first_target() {
    let m = model();
    let seq = sequence();
    let p = patch(&m, &seq);
    assert_eq!(p.size, m.config.crop.patch_size);
    assert_eq!(p.pixels.shape(), &[3, p.size, p.size]);
    let c = (p.size as f64) / 2.0;
    assert!((p.target_box.cx() - c).abs() < 1.0 && (p.target_box.cy() - c).abs() < 1.0);
}

#[test]
fn fixtures_are_deterministic() {
    assert_eq!(sequence(), sequence());
    assert_eq!(model(), model());
}
