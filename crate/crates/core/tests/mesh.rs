use fdbem::geometry::Vec3;
use fdbem::mesh::*;
use proptest::prelude::*;

fn flat_triangle() -> Mesh<f64> {
    // Used only through ElementMap since a single triangle is not closed.
    Mesh {
        vertices: vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.5, 0.0, 0.0),
            Vec3::new(0.5, 0.5, 0.0),
            Vec3::new(0.0, 0.5, 0.0),
        ],
        elements: vec![Element {
            vertex_ids: [0, 1, 2, 3, 4, 5],
            element_id: 1,
        }],
        characteristic_length: 1.0,
    }
}

#[test]
fn flat_element_geometry() {
    let m = flat_triangle();
    let (p, n, j) = m.element_geometry(0, [1.0 / 3.0, 1.0 / 3.0]).unwrap();
    assert!((p - Vec3::new(1.0 / 3.0, 1.0 / 3.0, 0.0)).norm() < 1e-15);
    assert!((j - 1.0).abs() < 1e-15);
    assert!((n - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
    let area: f64 = m.quadrature_points().iter().map(|q| q.weight).sum();
    assert!((area - 0.5).abs() < 1e-14);
}

#[test]
fn octasphere_has_48_points() {
    let m = octasphere::<f64>(1, 1.0);
    assert_eq!(m.num_elements(), 8);
    assert_eq!(m.quadrature_points().len(), 48);
}

#[test]
fn icosphere_720() {
    assert_eq!(icosphere::<f64>(6, 1.0).num_elements(), 720);
    assert_eq!(icosphere_subdivisions(2.0 * std::f64::consts::PI, 1.0, 5.0), 6);
}

#[test]
fn normals_point_outward_and_are_unit() {
    let m = icosphere::<f64>(2, 1.0);
    for q in m.quadrature_points() {
        assert!((q.normal.norm() - 1.0).abs() < 1e-12);
        assert!(q.normal.dot(&q.position) > 0.9);
        assert!(q.weight > 0.0);
    }
}

#[test]
fn flipped_input_is_reoriented() {
    let m = icosphere::<f64>(1, 1.0);
    let flipped: Vec<Element> = m
        .elements
        .iter()
        .map(|e| {
            let v = e.vertex_ids;
            Element {
                vertex_ids: [v[0], v[2], v[1], v[5], v[4], v[3]],
                element_id: e.element_id,
            }
        })
        .collect();
    let m2 = Mesh::new(m.vertices.clone(), flipped).unwrap();
    for q in m2.quadrature_points() {
        assert!(q.normal.dot(&q.position) > 0.0);
    }
}

#[test]
fn closed_surface_flux_vanishes() {
    let m = icosphere::<f64>(3, 1.0);
    let qp = m.quadrature_points();
    let area = m.area();
    for c in [Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.3, -0.2, 0.9)] {
        let s: f64 = qp.iter().map(|q| q.weight * q.normal.dot(&c)).sum();
        assert!(s.abs() < 1e-10 * area);
    }
}

#[test]
fn sphere_area_converges_at_high_order() {
    let exact = 4.0 * std::f64::consts::PI;
    let errs: Vec<f64> = [2, 4, 8].iter().map(|&n| (icosphere::<f64>(n, 1.0).area() - exact).abs()).collect();
    let order1 = (errs[0] / errs[1]).log2();
    let order2 = (errs[1] / errs[2]).log2();
    assert!(order1 >= 3.0 && order2 >= 3.0, "{errs:?}");
}

#[test]
fn quadrature_points_lie_near_sphere() {
    let e4: f64 = icosphere::<f64>(4, 1.0)
        .quadrature_points()
        .iter()
        .map(|q| (q.position.norm() - 1.0).abs())
        .fold(0.0, f64::max);
    let e8: f64 = icosphere::<f64>(8, 1.0)
        .quadrature_points()
        .iter()
        .map(|q| (q.position.norm() - 1.0).abs())
        .fold(0.0, f64::max);
    assert!(e4 / e8 > 6.0, "{e4} {e8}");
}

#[test]
fn msh2_round_trip() {
    let m = icosphere::<f64>(1, 1.0);
    let s = m.to_msh2_string();
    assert_eq!(MeshFormat::detect(&s), Some(MeshFormat::GmshMsh2));
    let m2: Mesh<f64> = parse_mesh_str(&s, MeshFormat::GmshMsh2).unwrap();
    assert_eq!(m2.num_elements(), 20);
    assert!((m2.area() - m.area()).abs() < 1e-13);
}

#[test]
fn quad_element_is_rejected() {
    let s = "$MeshFormat\n2.2 0 8\n$EndMeshFormat\n$Nodes\n4\n1 0 0 0\n2 1 0 0\n3 1 1 0\n4 0 1 0\n$EndNodes\n$Elements\n1\n1 3 2 1 1 1 2 3 4\n$EndElements\n";
    let err = parse_mesh_str::<f64>(s, MeshFormat::GmshMsh2).unwrap_err();
    assert!(err.to_string().contains("unsupported element type"), "{err}");
}

#[test]
fn open_surface_is_rejected() {
    let s = "$MeshFormat\n2.2 0 8\n$EndMeshFormat\n$Nodes\n6\n1 0 0 0\n2 1 0 0\n3 0 1 0\n4 0.5 0 0\n5 0.5 0.5 0\n6 0 0.5 0\n$EndNodes\n$Elements\n1\n1 9 2 1 1 1 2 3 4 5 6\n$EndElements\n";
    let err = parse_mesh_str::<f64>(s, MeshFormat::GmshMsh2).unwrap_err();
    assert!(matches!(err, MeshError::NonManifoldEdge { .. }), "{err}");
}

proptest! {
    #[test]
    fn partition_of_unity(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (x1, x2) = if a + b > 1.0 { (1.0 - a, 1.0 - b) } else { (a, b) };
        let s: f64 = shape_functions(x1, x2).iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-13);
        let (d1, d2) = shape_derivatives(x1, x2);
        prop_assert!(d1.iter().sum::<f64>().abs() < 1e-13);
        prop_assert!(d2.iter().sum::<f64>().abs() < 1e-13);
    }
}
