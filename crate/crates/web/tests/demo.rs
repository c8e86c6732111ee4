use deskbert_web::{gelu, gelu_reference, inspect_half, scaling};

fn decode(bits: u16) -> f64 {
    let sign = if bits >> 15 == 1 { -1.0 } else { 1.0 };
    let e = ((bits >> 10) & 0x1f) as i32;
    let m = (bits & 0x3ff) as f64;
    match e {
        0 => sign * m * 2f64.powi(-24),
        31 if m == 0.0 => sign * f64::INFINITY,
        31 => f64::NAN,
        _ => sign * (1.0 + m / 1024.0) * 2f64.powi(e - 15),
    }
}

#[test]
fn half_fields_reassemble_the_value() {
    for x in [1.0f32, -2.5, 60000.0, 6.0e-8, 1.0e-5, 0.1, -0.0, 3.3] {
        let v = inspect_half(x);
        assert_eq!(v.bits, (v.sign << 15) | (v.exponent << 10) | v.mantissa);
        assert_eq!(v.value, Some(decode(v.bits)), "{x}");
        assert!(v.abs_error.unwrap() <= v.spacing.unwrap() / 2.0 + 1e-30, "{x}");
    }
}

#[test]
fn half_classes() {
    assert_eq!(inspect_half(0.0).class, "zero");
    assert_eq!(inspect_half(1.0e-6).class, "subnormal");
    assert_eq!(inspect_half(1.0).class, "normal");
    assert_eq!(inspect_half(1.0e6).class, "infinity");
    assert_eq!(inspect_half(f32::NAN).class, "nan");
    assert_eq!(inspect_half(f32::NAN).value, None);
    assert_eq!(inspect_half(1.0).hex, "0x3c00");
    assert_eq!(inspect_half(1.0).spacing, Some(2f64.powi(-10)));
    assert_eq!(inspect_half(65504.0).spacing, None);
}

#[test]
fn half_json_has_no_bare_nan() {
    let s = serde_json::to_string(&inspect_half(f32::NAN)).unwrap();
    let v: serde_json::Value = serde_json::from_str(&s).unwrap();
    assert!(v["value"].is_null());
}

#[test]
fn scaling_grid_starts_at_one_device() {
    let pts = scaling(10.0, 4, 0.5, true).unwrap();
    assert_eq!(pts[0].label, "1M1G");
    assert_eq!(pts[0].efficiency, 1.0);
    assert!(pts.iter().all(|p| p.efficiency > 0.0 && p.efficiency <= 1.0));
    assert_eq!(pts.last().unwrap().label, "32M8G");
}

#[test]
fn accumulation_and_bandwidth_help() {
    let at = |gbps, k| scaling(gbps, k, 0.5, false).unwrap().last().unwrap().efficiency;
    assert!(at(10.0, 4) > at(10.0, 1));
    assert!(at(100.0, 1) > at(10.0, 1));
}

#[test]
fn scaling_rejects_bad_overlap() {
    assert!(scaling(10.0, 1, 1.5, false).is_err());
}

#[test]
fn gelu_variants_track_reference() {
    let c = gelu(-6.0, 6.0, 481).unwrap();
    assert_eq!(c.x.len(), 481);
    assert_eq!((c.x[0], c.x[480]), (-6.0, 6.0));
    assert_eq!((c.nodes_unfused, c.nodes_fused), (7, 1));
    assert!(c.max_abs_fused <= 1e-6);
    for (i, &x) in c.x.iter().enumerate() {
        let r = gelu_reference(x as f64);
        assert!((c.unfused[i] as f64 - r).abs() <= 1e-5, "{x}");
        assert!((c.amp[i] as f64 - r).abs() <= 1e-2 * r.abs().max(1.0), "{x}");
    }
    assert!(c.max_abs_amp > 0.0);
}
