use dtinet::dti::{derive_metrics, fit_tensor_ols};
use dtinet::eigen::eigen3_sym;
use dtinet::phantom::{make_phantom, make_phantom_with_regions, simulate_dwi, Region};
use dtinet::render::{extract_slice, render_slice, Axis};
use dtinet::sampling::electrostatic_directions;
use dtinet::{Dims, GradientScheme};

#[test]
fn fiber_slice_peaks_inside_fiber_region() {
    let dims = Dims::cube(16);
    let (field, regions) = make_phantom_with_regions(dims, "fiber-x", 2).unwrap();
    let scheme = GradientScheme::single_shell(1000.0, &electrostatic_directions(30, 1, 200)).unwrap();
    let (fit, _) = fit_tensor_ols(&simulate_dwi(&field, &scheme).unwrap()).unwrap();
    let fa = derive_metrics(&fit).fa;
    let img = render_slice(&fa, dims, Axis::Z, 8, 1.0).unwrap();
    let region_codes: Vec<f64> = regions.iter().map(|r| f64::from(u8::from(*r == Region::Fiber))).collect();
    let (_, _, fiber) = extract_slice(&region_codes, dims, Axis::Z, 8).unwrap();
    let peak = img.max();
    assert!(peak > 0);
    for (p, f) in img.pixels.iter().zip(&fiber) {
        if *p == peak {
            assert_eq!(*f, 1.0);
        }
    }
}

#[test]
fn fiber_core_points_along_x() {
    let (field, regions) = make_phantom_with_regions(Dims::cube(12), "fiber-x", 3).unwrap();
    for (t, r) in field.tensors().iter().zip(&regions) {
        if *r == Region::Fiber {
            let v = eigen3_sym(t).vectors[0];
            assert!((v[0].abs() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn iso_only_has_zero_fa() {
    let field = make_phantom(Dims::cube(10), "iso-only", 1).unwrap();
    let maps = derive_metrics(&field);
    assert!(maps.fa.iter().all(|&f| f == 0.0));
}

#[test]
fn noiseless_signal_within_zero_and_s0() {
    let field = make_phantom(Dims::cube(10), "mixed", 4).unwrap();
    let scheme = GradientScheme::single_shell(1000.0, &electrostatic_directions(20, 2, 200)).unwrap();
    let dwi = simulate_dwi(&field, &scheme).unwrap();
    for v in 0..field.dims().n_voxels() {
        if field.mask()[v] {
            let s0 = field.s0()[v];
            assert!(dwi.voxel_signals(v).iter().all(|&s| s > 0.0 && s <= s0));
        }
    }
}
