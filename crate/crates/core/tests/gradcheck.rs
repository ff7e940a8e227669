mod support;

use support::gradcheck::{Report, GROUPS};

fn run(group: &str) {
    let (_, f) = GROUPS.iter().find(|(n, _)| *n == group).unwrap();
    let mut r = Report::default();
    f(&mut r);
    for (name, worst, tol) in &r.rows {
        println!("{name}: worst relative error {worst:.3e} (tol {tol:.0e})");
    }
    assert!(r.failures().is_empty(), "{:?}", r.failures());
}

#[test]
fn every_group_listed() {
    assert_eq!(GROUPS.len(), 11);
}

#[test]
fn elementwise_binary() {
    run("elementwise_binary");
}

#[test]
fn elementwise_unary_smooth() {
    run("elementwise_unary_smooth");
}

#[test]
fn elementwise_kinked() {
    run("elementwise_kinked");
}

#[test]
fn reductions() {
    run("reductions");
}

#[test]
fn shape_ops() {
    run("shape_ops");
}

#[test]
fn dense_ops() {
    run("dense_ops");
}

#[test]
fn conv2d() {
    run("conv2d");
}

#[test]
fn pooling() {
    run("pooling");
}

#[test]
fn softmax_family() {
    run("softmax_family");
}

#[test]
fn resampling() {
    run("resampling");
}

#[test]
fn attack_losses() {
    run("attack_losses");
}
