use ordervqa::autograd::smooth_l1;
use ordervqa::grounding::{loss_all, loss_face, loss_loc, loss_over, AnchorLabel, LossWeights};
use ordervqa::model::FACIAL_REGION_COUNT;

const TOL: f64 = 1e-6;

fn label(g: f64, positive: bool, dc: f64, dw: f64) -> AnchorLabel {
    AnchorLabel {
        g_over: g,
        positive,
        delta_c: dc,
        delta_w: dw,
    }
}

fn round5(x: f64) -> f64 {
    (x * 1e5).round() / 1e5
}

fn over_example() -> f64 {
    loss_over(&[0.8, 0.1], &[label(1.0, true, 0.0, 0.0), label(0.0, false, 0.0, 0.0)]).unwrap()
}

fn loc_example() -> f64 {
    loss_loc(&[(0.5, 2.0)], &[label(1.0, true, 0.0, 0.0)]).unwrap()
}

fn face_example() -> f64 {
    let mut probs = [0.0; FACIAL_REGION_COUNT];
    let mut areas = [0.0; FACIAL_REGION_COUNT];
    probs[0] = 0.5;
    areas[0] = 1.0;
    probs[5] = 1.0;
    areas[5] = 1.0;
    loss_face(&[probs], &[label(1.0, true, 0.0, 0.0)], &areas).unwrap()
}

#[test]
fn overlap_loss_one_positive_one_negative() {
    let l = over_example();
    assert!((l - (-(0.8f64.ln()) - 0.9f64.ln())).abs() < TOL);
    assert_eq!(round5(l), 0.32850);
}

#[test]
fn overlap_loss_perfect_is_zero() {
    let l = loss_over(&[1.0, 0.0, 1.0], &[label(1.0, true, 0.0, 0.0), label(0.0, false, 0.0, 0.0), label(1.0, true, 0.0, 0.0)]).unwrap();
    assert!(l.abs() < TOL);
}

#[test]
fn overlap_loss_soft_target() {
    let l = loss_over(&[0.7, 0.0], &[label(0.7, true, 0.0, 0.0), label(0.0, false, 0.0, 0.0)]).unwrap();
    assert!((l - 0.6108643020548935).abs() < TOL);
    assert_eq!(round5(l), 0.61086);
}

#[test]
fn location_loss() {
    assert!((loc_example() - 1.625).abs() < TOL);
    let exact = loss_loc(&[(0.3, -0.2), (9.0, 9.0)], &[label(1.0, true, 0.3, -0.2), label(0.1, false, 0.0, 0.0)]).unwrap();
    assert_eq!(exact, 0.0);
}

#[test]
fn smooth_l1_is_continuous_at_one() {
    assert_eq!(smooth_l1(1.0), 0.5);
    assert_eq!(smooth_l1(-1.0), 0.5);
    assert!((smooth_l1(1.0 - 1e-9) - 0.5).abs() < 1e-8);
    assert!((smooth_l1(1.0 + 1e-9) - 0.5).abs() < 1e-8);
}

#[test]
fn face_loss() {
    assert!((face_example() - std::f64::consts::LN_2).abs() < TOL);
    let areas = [1.0; FACIAL_REGION_COUNT];
    let perfect = loss_face(&[[1.0; FACIAL_REGION_COUNT]], &[label(1.0, true, 0.0, 0.0)], &areas).unwrap();
    assert!(perfect.abs() < TOL);
}

#[test]
fn combined_loss() {
    let w = LossWeights::default();
    assert_eq!((w.over, w.loc, w.face), (100.0, 10.0, 0.5));
    let total = loss_all(over_example(), loc_example(), face_example(), &w);
    let exact = 100.0 * (-(0.8f64.ln()) - 0.9f64.ln()) + 10.0 * 1.625 + 0.5 * std::f64::consts::LN_2;
    assert!((total - exact).abs() < TOL);
    #[allow(clippy::approx_constant)]
    let printed = loss_all(0.3285, 1.625, 0.69315, &w);
    assert!((printed - 49.446575).abs() < TOL);
    assert!((printed - 49.44658).abs() < 1e-5);
    let plain = LossWeights { face: 0.0, ..w };
    assert_eq!(loss_all(0.3285, 1.625, 123.0, &plain), 100.0 * 0.3285 + 10.0 * 1.625);
    assert_eq!(loss_all(0.0, 0.0, 0.0, &w), 0.0);
}

#[test]
fn empty_anchor_sets_are_named() {
    let e = loss_over(&[0.4], &[label(0.2, false, 0.0, 0.0)]).unwrap_err();
    assert!(e.to_string().contains("positive"), "{e}");
    let e = loss_over(&[0.4], &[label(0.9, true, 0.0, 0.0)]).unwrap_err();
    assert!(e.to_string().contains("negative"), "{e}");
    assert!(loss_face(&[[0.5; FACIAL_REGION_COUNT]], &[label(0.2, false, 0.0, 0.0)], &[0.0; FACIAL_REGION_COUNT]).is_err());
}
