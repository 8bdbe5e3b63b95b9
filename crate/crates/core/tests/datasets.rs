use std::fs;
use std::path::Path;

use metavgan::datasets::{make_synthetic, ClassId, DatasetBundle, SyntheticBenchSpec};
use metavgan::neural::Matrix;
use metavgan::Error;
use tempfile::tempdir;

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    ["meta.json", "features.csv", "attributes.csv"]
        .iter()
        .map(|f| (f.to_string(), fs::read(dir.join(f)).unwrap()))
        .collect()
}

fn ids(prefix: &str, n: usize) -> Vec<ClassId> {
    (0..n).map(|i| ClassId::new(format!("{prefix}{i}"))).collect()
}

#[test]
fn save_load_roundtrip_is_exact() {
    let (bundle, _) = make_synthetic(&SyntheticBenchSpec::default()).unwrap();
    let dir = tempdir().unwrap();
    bundle.save(dir.path()).unwrap();
    let back = DatasetBundle::load(dir.path()).unwrap();
    assert_eq!(back, bundle);
    assert_eq!(back.features.as_slice(), bundle.features.as_slice());
}

#[test]
fn resave_is_byte_identical() {
    let (bundle, _) = make_synthetic(&SyntheticBenchSpec {
        seed: 9,
        ..Default::default()
    })
    .unwrap();
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    bundle.save(a.path()).unwrap();
    DatasetBundle::load(a.path()).unwrap().save(b.path()).unwrap();
    assert_eq!(read_all(a.path()), read_all(b.path()));
}

#[test]
fn empty_unseen_list_roundtrips() {
    let classes = ids("c", 2);
    let bundle = DatasetBundle::new(
        "tiny",
        Matrix::from_rows(&[vec![0.5, 1.0], vec![-2.0, 3.25]]).unwrap(),
        classes.clone(),
        classes.clone(),
        Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap(),
        classes,
        vec![],
        vec![1],
        vec![],
    )
    .unwrap();
    let dir = tempdir().unwrap();
    bundle.save(dir.path()).unwrap();
    assert_eq!(DatasetBundle::load(dir.path()).unwrap(), bundle);
}

/// Writes a bundle directory by hand, bypassing `save`.
fn write_fixture(dir: &Path, d: usize, da: usize, seen: &[ClassId], unseen: &[ClassId], overlap: Option<&str>) {
    let classes: Vec<&ClassId> = seen.iter().chain(unseen).collect();
    let mut seen_list: Vec<String> = seen.iter().map(|c| format!("\"{c}\"")).collect();
    if let Some(c) = overlap {
        seen_list.push(format!("\"{c}\""));
    }
    let n_seen = seen.len();
    let meta = format!(
        "{{\"name\":\"fixture\",\"feature_dim\":{d},\"attr_dim\":{da},\"classes\":[{}],\"seen_classes\":[{}],\"unseen_classes\":[{}],\"seen_test_rows\":[0],\"unseen_test_rows\":[{}]}}",
        classes.iter().map(|c| format!("\"{c}\"")).collect::<Vec<_>>().join(","),
        seen_list.join(","),
        unseen.iter().map(|c| format!("\"{c}\"")).collect::<Vec<_>>().join(","),
        (n_seen..classes.len()).map(|r| r.to_string()).collect::<Vec<_>>().join(","),
    );
    fs::write(dir.join("meta.json"), meta).unwrap();
    let mut f = String::from("row_id,label");
    for j in 0..d {
        f.push_str(&format!(",f{j}"));
    }
    f.push('\n');
    for (r, c) in classes.iter().enumerate() {
        f.push_str(&format!("{r},{c}"));
        for j in 0..d {
            f.push_str(&format!(",{}", (r * d + j) as f64 * 1e-3));
        }
        f.push('\n');
    }
    fs::write(dir.join("features.csv"), f).unwrap();
    let mut a = String::from("class_id");
    for j in 0..da {
        a.push_str(&format!(",a{j}"));
    }
    a.push('\n');
    for (i, c) in classes.iter().enumerate() {
        a.push_str(c.as_str());
        for j in 0..da {
            a.push_str(&format!(",{}", ((i + j) % 7) as f64));
        }
        a.push('\n');
    }
    fs::write(dir.join("attributes.csv"), a).unwrap();
}

#[test]
fn awa2_shaped_header_parses() {
    let dir = tempdir().unwrap();
    write_fixture(dir.path(), 2048, 85, &ids("s", 40), &ids("u", 10), None);
    let b = DatasetBundle::load(dir.path()).unwrap();
    assert_eq!((b.feature_dim, b.attr_dim), (2048, 85));
    assert_eq!((b.seen_classes.len(), b.unseen_classes.len()), (40, 10));
}

#[test]
fn overlap_error_names_the_class() {
    let dir = tempdir().unwrap();
    let unseen = vec![ClassId::from("c3")];
    write_fixture(dir.path(), 4, 2, &ids("c", 3), &unseen, Some("c3"));
    match DatasetBundle::load(dir.path()) {
        Err(Error::ClassOverlap(c)) => assert_eq!(c, vec!["c3".to_string()]),
        other => panic!("expected overlap error, got {other:?}"),
    }
}

#[test]
fn missing_file_is_named() {
    let dir = tempdir().unwrap();
    write_fixture(dir.path(), 4, 2, &ids("c", 3), &ids("u", 1), None);
    fs::remove_file(dir.path().join("attributes.csv")).unwrap();
    match DatasetBundle::load(dir.path()) {
        Err(Error::MissingFile(p)) => assert!(p.ends_with("attributes.csv")),
        other => panic!("expected missing-file error, got {other:?}"),
    }
}

#[test]
fn header_dimension_mismatch_is_reported() {
    let dir = tempdir().unwrap();
    write_fixture(dir.path(), 4, 2, &ids("c", 3), &ids("u", 1), None);
    let meta = fs::read_to_string(dir.path().join("meta.json")).unwrap();
    fs::write(dir.path().join("meta.json"), meta.replace("\"feature_dim\":4", "\"feature_dim\":5")).unwrap();
    assert!(matches!(
        DatasetBundle::load(dir.path()),
        Err(Error::DimensionMismatch { .. })
    ));
}

#[test]
fn unknown_label_is_reported() {
    let dir = tempdir().unwrap();
    write_fixture(dir.path(), 4, 2, &ids("c", 3), &ids("u", 1), None);
    let f = fs::read_to_string(dir.path().join("features.csv")).unwrap();
    fs::write(dir.path().join("features.csv"), f.replace("1,c1,", "1,zebra,")).unwrap();
    match DatasetBundle::load(dir.path()) {
        Err(Error::UnknownClass { class, .. }) => assert_eq!(class, "zebra"),
        other => panic!("expected unknown-class error, got {other:?}"),
    }
}

#[test]
fn default_benchmark_oracle_beats_95_percent() {
    let (b, means) = make_synthetic(&SyntheticBenchSpec::default()).unwrap();
    assert_eq!((b.seen_classes.len(), b.unseen_classes.len()), (8, 4));
    assert_eq!((b.feature_dim, b.attr_dim), (64, 16));
    let acc = means.nearest_mean_accuracy(&b, &b.unseen_test_rows, &b.unseen_classes);
    assert!(acc > 0.95, "nearest-mean accuracy {acc}");
}

/// Solves `m x = y` by Gaussian elimination with partial pivoting.
fn solve(mut m: Vec<Vec<f64>>, mut y: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = m.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, p);
        y.swap(c, p);
        for r in 0..n {
            if r != c {
                let f = m[r][c] / m[c][c];
                for k in 0..n {
                    m[r][k] -= f * m[c][k];
                }
                for k in 0..y[r].len() {
                    y[r][k] -= f * y[c][k];
                }
            }
        }
    }
    (0..n).map(|r| y[r].iter().map(|v| v / m[r][r]).collect()).collect()
}

#[test]
fn attributes_linearly_predict_unseen_means() {
    let (b, means) = make_synthetic(&SyntheticBenchSpec::default()).unwrap();
    let attr = |c: &ClassId| b.attribute(c).unwrap().to_vec();
    let mean = |c: &ClassId| means.mean_of(c).unwrap().to_vec();
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();

    // Minimum-norm ridge fit on seen classes: W = A^T (A A^T + lambda I)^-1 M.
    let a_seen: Vec<Vec<f64>> = b.seen_classes.iter().map(attr).collect();
    let m_seen: Vec<Vec<f64>> = b.seen_classes.iter().map(mean).collect();
    let gram: Vec<Vec<f64>> = a_seen
        .iter()
        .enumerate()
        .map(|(i, u)| {
            a_seen
                .iter()
                .enumerate()
                .map(|(j, v)| dot(u, v) + if i == j { 1e-6 } else { 0.0 })
                .collect()
        })
        .collect();
    let coef = solve(gram, m_seen);

    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    let truth: Vec<Vec<f64>> = b.unseen_classes.iter().map(mean).collect();
    let d = truth[0].len();
    let centre: Vec<f64> = (0..d).map(|j| truth.iter().map(|t| t[j]).sum::<f64>() / truth.len() as f64).collect();
    for (c, t) in b.unseen_classes.iter().zip(&truth) {
        let k: Vec<f64> = a_seen.iter().map(|u| dot(u, &attr(c))).collect();
        for j in 0..d {
            let pred: f64 = k.iter().zip(&coef).map(|(kv, row)| kv * row[j]).sum();
            ss_res += (t[j] - pred).powi(2);
            ss_tot += (t[j] - centre[j]).powi(2);
        }
    }
    let r2 = 1.0 - ss_res / ss_tot;
    assert!(r2 > 0.9, "held-out R^2 {r2}");
}
