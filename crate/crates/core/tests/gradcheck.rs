use rflow_core::gradcheck::Precision;
use rflow_core::gradsuite::{check_end_to_end, check_layer, LAYERS};

fn check_layers(precision: Precision, tol: f64) {
    for layer in LAYERS {
        let report = check_layer(layer, precision).unwrap();
        let worst = report.worst().unwrap();
        assert!(
            report.max_rel_err() < tol,
            "{layer:?} {precision:?}: `{}` rel err {:e}",
            worst.name,
            worst.rel_err
        );
        let x = report.tensors.iter().find(|t| t.name == "x").unwrap();
        assert!(x.checked == 20);
    }
}

#[test]
fn every_layer_f64_shadow() {
    check_layers(Precision::F64, 1e-6);
}

#[test]
fn every_layer_f32() {
    check_layers(Precision::F32, 1e-3);
}

fn end_to_end(precision: Precision, tol: f64) {
    let report = check_end_to_end(precision).unwrap();
    let worst = report.worst().unwrap();
    assert!(
        report.max_rel_err() < tol,
        "{precision:?}: `{}` rel err {:e}",
        worst.name,
        worst.rel_err
    );
}

#[test]
fn end_to_end_rfm_loss_f64_shadow() {
    end_to_end(Precision::F64, 1e-6);
}

#[test]
fn end_to_end_rfm_loss_f32() {
    end_to_end(Precision::F32, 1e-2);
}

