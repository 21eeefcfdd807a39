use std::f64::consts::{FRAC_PI_2, TAU};

use super::*;
use crate::clipette::{accuracy, pretrain, Activation, PretrainConfig, Sizes};

fn small(seed: u64) -> DomainSpec {
    DomainSpec { k_classes: 4, d_in: 5, n_per_class: 6, seed, ..DomainSpec::default() }
}

#[test]
fn generation_is_a_pure_function_of_the_spec() {
    let spec = small(3);
    let a = gen_domain(&spec).unwrap();
    let b = gen_domain(&spec).unwrap();
    assert!(a.inputs.bit_eq(&b.inputs));
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.digest(), b.digest());
    assert_ne!(a.digest(), gen_domain(&spec.with_draw(1)).unwrap().digest());
}

#[test]
fn shape_and_labels() {
    let ds = gen_domain(&small(1)).unwrap();
    assert_eq!(ds.inputs.shape(), &[24, 5]);
    assert_eq!(ds.labels[..5], [0, 1, 2, 3, 0]);
    for k in 0..4 {
        assert_eq!(ds.labels.iter().filter(|&&y| y == k).count(), 6);
    }
}

#[test]
fn means_respect_radius_and_separation() {
    let spec = DomainSpec { class_sep: 2.5, ..DomainSpec::default() };
    let means = class_means(&spec).unwrap();
    assert_eq!(means.len(), 10);
    for (i, m) in means.iter().enumerate() {
        assert!((crate::ndcore::norm(m) - 2.5).abs() < 1e-12);
        for n in &means[..i] {
            let d: f64 = m.iter().zip(n).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            assert!(d >= 2.5);
        }
    }
    let draw = DomainSpec { draw: 5, rot_theta: 0.4, ..spec };
    assert_eq!(means, class_means(&draw).unwrap());
}

#[test]
fn overcrowded_circle_is_infeasible() {
    let spec = DomainSpec { k_classes: 7, d_in: 2, ..DomainSpec::default() };
    assert!(matches!(gen_domain(&spec), Err(Error::InfeasibleSpec(_))));
}

#[test]
fn full_turn_equals_no_rotation() {
    let a = gen_domain(&small(2)).unwrap();
    let b = gen_domain(&DomainSpec { rot_theta: TAU, ..small(2) }).unwrap();
    assert!(a.inputs.bit_eq(&b.inputs));
}

#[test]
fn rotation_touches_only_the_first_plane() {
    let a = gen_domain(&small(4)).unwrap();
    let b = gen_domain(&DomainSpec { rot_theta: 0.8, ..small(4) }).unwrap();
    for i in 0..a.len() {
        let (ra, rb) = (a.inputs.row(i), b.inputs.row(i));
        assert_eq!(ra[2..], rb[2..]);
        let na = (ra[0] * ra[0] + ra[1] * ra[1]).sqrt();
        let nb = (rb[0] * rb[0] + rb[1] * rb[1]).sqrt();
        assert!((na - nb).abs() < 1e-12);
        let angle = (ra[0] * rb[1] - ra[1] * rb[0]).atan2(ra[0] * rb[0] + ra[1] * rb[1]);
        assert!((angle - 0.8).abs() < 1e-12);
    }
}

#[test]
fn invalid_specs_are_config_errors() {
    for spec in [
        DomainSpec { class_sep: 0.0, ..small(0) },
        DomainSpec { scale: -1.0, ..small(0) },
        DomainSpec { noise_sigma: f64::NAN, ..small(0) },
        DomainSpec { k_classes: 1, ..small(0) },
    ] {
        assert!(matches!(gen_domain(&spec), Err(Error::InvalidConfig(_))));
    }
}

#[test]
fn source_draw_supports_an_accurate_classifier() {
    let spec = DomainSpec { n_per_class: 60, seed: 11, ..DomainSpec::default() };
    let train = gen_domain(&spec).unwrap().to_batch().unwrap();
    let held_out = gen_domain(&spec.with_draw(1)).unwrap().to_batch().unwrap();
    let sizes = Sizes::default();
    let cfg = PretrainConfig { epochs: 60, seed: 2, ..PretrainConfig::default() };
    let pre = pretrain(sizes, 10.0, Activation::Tanh, &train, &cfg).unwrap();
    let acc = accuracy(&pre.model, &pre.prompt, &held_out).unwrap();
    assert!(acc >= 0.9, "held-out accuracy {acc}");
}

#[test]
fn proxy_of_identical_draws_is_small() {
    let spec = DomainSpec { n_per_class: 50, ..DomainSpec::default() };
    let a = gen_domain(&spec).unwrap();
    let p = domain_distance_proxy(&a, &a.clone(), 1).unwrap();
    assert!(p <= 0.1, "{p}");
}

#[test]
fn proxy_of_disjoint_clusters_is_large() {
    let spec = DomainSpec { k_classes: 2, d_in: 3, n_per_class: 100, ..DomainSpec::default() };
    let a = gen_domain(&spec).unwrap();
    let mut far = a.inputs.clone();
    for i in 0..far.rows() {
        far.row_mut(i)[0] += 50.0;
    }
    let b = DomainDataset::new(far, a.labels.clone(), spec).unwrap();
    let p = domain_distance_proxy(&a, &b, 2).unwrap();
    assert!(p >= 0.9, "{p}");
}

#[test]
fn proxy_is_symmetric() {
    let a = gen_domain(&small(6)).unwrap();
    let b = gen_domain(&DomainSpec { rot_theta: 0.5, draw: 1, ..small(6) }).unwrap();
    let ab = domain_distance_proxy(&a, &b, 3).unwrap();
    let ba = domain_distance_proxy(&b, &a, 3).unwrap();
    assert_eq!(ab.to_bits(), ba.to_bits());
    assert!((0.0..=1.0).contains(&ab));
}

#[test]
fn proxy_grows_with_rotation() {
    let base = DomainSpec { n_per_class: 100, seed: 21, ..DomainSpec::default() };
    let source = gen_domain(&base).unwrap();
    let thetas: Vec<f64> = (0..6).map(|i| FRAC_PI_2 * i as f64 / 5.0).collect();
    let proxies: Vec<f64> = thetas
        .iter()
        .map(|&t| {
            let target = gen_domain(&DomainSpec { rot_theta: t, draw: 1, ..base }).unwrap();
            domain_distance_proxy(&source, &target, 5).unwrap()
        })
        .collect();
    let rho = spearman(&thetas, &proxies);
    assert!(rho >= 0.9, "{proxies:?}");
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (m(&rx), m(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn csv_round_trip_is_exact() {
    let ds = gen_domain(&DomainSpec { noise_sigma: 0.3, rot_theta: 0.2, ..small(8) }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    save_csv(&ds, &path).unwrap();
    let back = load_csv(&path).unwrap();
    assert!(back.inputs.bit_eq(&ds.inputs));
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.spec, ds.spec);
}

#[test]
fn csv_errors() {
    let ds = gen_domain(&small(9)).unwrap();
    let text = to_csv(&ds).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[4] = format!("1,abc{}", ",0.5".repeat(4));
    let bad = lines.join("\n");
    assert!(matches!(parse_csv(&bad), Err(Error::Parse { line: 5, .. })));

    let no_header: String = text.lines().filter(|l| !l.starts_with("label")).collect::<Vec<_>>().join("\n");
    assert!(matches!(parse_csv(&no_header), Err(Error::Format(_))));

    let empty: String = text.lines().take(2).collect::<Vec<_>>().join("\n");
    assert!(matches!(parse_csv(&empty), Err(Error::InvalidDataset(_))));
}

#[test]
fn csv_without_metadata_infers_the_spec() {
    let text = "label,f0,f1\n0,1.0,2.0\n1,3.0,4.0\n";
    let ds = parse_csv(text).unwrap();
    assert_eq!((ds.spec.k_classes, ds.spec.d_in, ds.spec.n_per_class), (2, 2, 1));
    assert_eq!(ds.inputs.row(1), &[3.0, 4.0]);
}
