use datbev_core::gradcheck::{da_sca_suite, depth_suite, detection_suite, dns_suite, full_model_check, tiny_model_config};
use datbev_core::harness::DnsSource;

const TOL: f64 = 1e-4;

#[test]
fn da_sca_vjp_matches_finite_differences() {
    let r = da_sca_suite(100, 1).unwrap();
    assert!(r.passed(TOL), "{r:?}");
}

#[test]
fn dns_loss_matches_finite_differences() {
    let r = dns_suite(100, 2).unwrap();
    assert!(r.passed(TOL), "{r:?}");
}

#[test]
fn depth_loss_matches_finite_differences() {
    let r = depth_suite(100, 3).unwrap();
    assert!(r.passed(TOL), "{r:?}");
}

#[test]
fn detection_loss_matches_finite_differences() {
    let r = detection_suite(100, 4).unwrap();
    assert!(r.passed(TOL), "{r:?}");
}

#[test]
fn full_model_gradient_with_dense_dns() {
    let r = full_model_check(&tiny_model_config(), 20, 5).unwrap();
    assert!(r.passed(TOL), "{r:?}");
}

#[test]
fn full_model_gradient_with_pseudo_queries() {
    let mut cfg = tiny_model_config();
    cfg.dns_source = DnsSource::PseudoQuery;
    let r = full_model_check(&cfg, 20, 6).unwrap();
    assert!(r.passed(TOL), "{r:?}");
}

#[test]
fn full_model_gradient_with_shared_dns_head() {
    let mut cfg = tiny_model_config();
    cfg.dns_shared_head = true;
    let r = full_model_check(&cfg, 20, 8).unwrap();
    assert!(r.passed(TOL), "{r:?}");
}
