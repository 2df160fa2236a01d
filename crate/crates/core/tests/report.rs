use mixopt_core::dro::{MixtureWeights, Provenance};
use mixopt_core::report::{render_weight_table, Mark};

const DOMAINS: [&str; 11] = [
    "UR5", "Cable Routing", "Bridge", "Jaco", "Kuka", "RoboTurk", "RT1", "Taco Play", "Taco Extra", "Toto", "Viola",
];

// RT-X mixture weights for uniform, human-expert and learned weighting, in percent.
const UNIFORM: [&str; 11] = [
    "1.01%", "0.43%", "22.7%", "0.81%", "24.9%", "1.94%", "40.9%", "0.60%", "2.46%", "3.42%", "0.80%",
];
const HUMAN: [&str; 11] = [
    "1.22%", "1.56%", "27.5%", "1.95%", "25.1%", "2.35%", "26.8%", "1.46%", "5.94%", "4.13%", "1.90%",
];
const LEARNED: [&str; 11] = [
    "2.37%", "0.20%", "19.9%", "0.39%", "12.1%", "1.14%", "42.5%", "0.63%", "3.04%", "16.3%", "1.51%",
];

fn weights(cells: &[&str], provenance: Provenance) -> MixtureWeights {
    let alpha = cells
        .iter()
        .map(|c| c.trim_end_matches('%').parse::<f64>().unwrap() / 100.0)
        .collect();
    MixtureWeights { alpha, provenance }
}

#[test]
fn rtx_table_renders_published_cells_and_marks() {
    let rows = vec![
        ("Uniform".to_string(), weights(&UNIFORM, Provenance::Uniform)),
        ("Human".to_string(), weights(&HUMAN, Provenance::Human)),
        ("Learned".to_string(), weights(&LEARNED, Provenance::DroAveraged)),
    ];
    let names: Vec<String> = DOMAINS.iter().map(|s| s.to_string()).collect();
    let table = render_weight_table(&rows, &names).unwrap();
    assert_eq!(table.baseline, 0);

    for (row, expected) in table.rows.iter().zip([UNIFORM, HUMAN, LEARNED]) {
        let shown: Vec<&str> = row.cells.iter().map(|c| c.percent.as_str()).collect();
        assert_eq!(shown, expected, "{}", row.method);
    }

    let marks = |r: usize| -> Vec<Option<Mark>> { table.rows[r].cells.iter().map(|c| c.mark).collect() };
    use Mark::{Down, Up};
    assert!(marks(0).iter().all(Option::is_none));
    // Jaco under human weights is +141% and so marked, although the source table leaves it plain.
    assert_eq!(
        marks(1),
        vec![None, Some(Up), None, Some(Up), None, None, Some(Down), Some(Up), Some(Up), None, Some(Up)]
    );
    assert_eq!(
        marks(2),
        vec![Some(Up), Some(Down), None, Some(Down), Some(Down), Some(Down), None, None, None, Some(Up), Some(Up)]
    );
}

#[test]
fn text_layout_is_stable() {
    let rows = vec![
        ("uniform".to_string(), MixtureWeights { alpha: vec![0.25, 0.75], provenance: Provenance::Uniform }),
        ("dro".to_string(), MixtureWeights { alpha: vec![0.5, 0.5], provenance: Provenance::DroAveraged }),
    ];
    let table = render_weight_table(&rows, &["short".into(), "a longer name".into()]).unwrap();
    let expected = "\
method   short    a longer name
uniform  25.0%    75.0%
dro      50.0% ↑  50.0% ↓
";
    assert_eq!(table.to_text(), expected);
    let csv = table.to_csv().unwrap();
    assert_eq!(
        csv,
        "method,domain,alpha,percent,mark\n\
         uniform,short,0.25,25.0%,\n\
         uniform,a longer name,0.75,75.0%,\n\
         dro,short,0.5,50.0%,up\n\
         dro,a longer name,0.5,50.0%,down\n"
    );
}
