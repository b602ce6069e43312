use semcloak::record::{AttackInfo, AttackKind, CellRecord, DefenseRow, UtilityRow};
use semcloak::report::{curves, defense_markdown, emit_report, Metric, DEFENSE_HEADER};
use semcloak::{ExperimentConfig, ExperimentRecord};
use semcloak_core::attacks::Strategy;
use semcloak_core::metrics::MetricReport;
use semcloak_core::signal::{ChannelFamily, ChannelSpec};

fn report(psnr: f64, fpesr: f64) -> MetricReport {
    MetricReport {
        psnr: vec![psnr - 1.0, psnr + 1.0],
        ms_ssim: vec![0.5, 0.7],
        perceptual: vec![0.1, 0.3],
        same_identity: vec![fpesr >= 0.5, fpesr >= 1.0],
        fpesr,
        n_samples: 2,
    }
}

fn cell(attack: AttackKind, family: ChannelFamily, snr: f64, psnr: f64) -> CellRecord {
    CellRecord {
        attack,
        channel: ChannelSpec::new(family, snr),
        channel_seed: 1,
        attack_seed: 2,
        info: AttackInfo::default(),
        report: report(psnr, 0.5),
    }
}

fn record() -> ExperimentRecord {
    let mut r = ExperimentRecord::new(&ExperimentConfig::default());
    r.identities = 4;
    let glass = AttackKind::Strategy(Strategy::Glass);
    // Deliberately out of SNR order.
    for (snr, psnr) in [(20.0, 30.0), (0.0, 10.0), (10.0, 20.0)] {
        r.cells.push(cell(glass, ChannelFamily::Awgn, snr, psnr));
    }
    r.cells.push(cell(AttackKind::Decoder, ChannelFamily::Awgn, 5.0, 25.0));
    r.cells.push(cell(glass, ChannelFamily::Rayleigh, 5.0, 12.0));
    r
}

#[test]
fn curves_are_sorted_by_snr_and_split_by_family() {
    let r = record();
    let c = curves(&r, ChannelFamily::Awgn, Metric::Psnr);
    assert_eq!(c[&AttackKind::Strategy(Strategy::Glass)], vec![(0.0, 10.0), (10.0, 20.0), (20.0, 30.0)]);
    assert_eq!(c[&AttackKind::Decoder], vec![(5.0, 25.0)]);
    let c = curves(&r, ChannelFamily::Rayleigh, Metric::MsSsim);
    assert_eq!(c.len(), 1);
    assert!((c[&AttackKind::Strategy(Strategy::Glass)][0].1 - 0.6).abs() < 1e-12);
}

#[test]
fn single_point_sweeps_still_render() {
    let tmp = tempfile::tempdir().unwrap();
    let mut r = ExperimentRecord::new(&ExperimentConfig::default());
    r.cells.push(cell(AttackKind::Decoder, ChannelFamily::Awgn, 5.0, 25.0));
    let files = emit_report(&r, tmp.path()).unwrap();
    let svgs: Vec<_> = files.iter().filter(|f| f.extension().unwrap() == "svg").collect();
    // Four metric curves and one bar chart for the single family.
    assert_eq!(svgs.len(), 5);
    for f in svgs {
        let text = std::fs::read_to_string(f).unwrap();
        assert!(text.starts_with("<svg") && text.contains("deepjscc"), "{}", f.display());
    }
}

#[test]
fn defense_table_has_host_private_and_fpesr_groups() {
    let tmp = tempfile::tempdir().unwrap();
    let mut r = record();
    r.defense.push(DefenseRow {
        attack: AttackKind::Decoder,
        channel: ChannelSpec::new(ChannelFamily::Awgn, 20.0),
        info: AttackInfo::default(),
        vs_host: report(25.0, 1.0),
        vs_private: report(9.0, 0.0),
    });
    for snr in [0.0, 10.0] {
        r.utility.push(UtilityRow {
            channel: ChannelSpec::new(ChannelFamily::Awgn, snr),
            undefended: report(20.0 + snr, 0.5),
            defended: report(19.0 + snr, 0.5),
        });
    }
    let md = defense_markdown(&r);
    let lines: Vec<&str> = md.lines().collect();
    assert!(lines[0].contains("Similarity with Host Images"));
    assert!(lines[0].contains("Similarity with Private Images"));
    assert!(lines[0].trim_end().ends_with("FPESR |"));
    assert_eq!(lines[3], "| deepjscc | 25.00 | 0.600 | 9.00 | 0.600 | 0.000 |");

    let files = emit_report(&r, tmp.path()).unwrap();
    let names: Vec<String> = files.iter().map(|f| f.file_name().unwrap().to_string_lossy().into_owned()).collect();
    for want in ["attacks.csv", "defense.csv", "defense.md", "utility.csv", "utility_psnr.svg", "fpesr_awgn.svg", "fpesr_bars_rayleigh.svg"] {
        assert!(names.iter().any(|n| n == want), "missing {want}");
    }
    let mut rd = csv::Reader::from_path(tmp.path().join("defense.csv")).unwrap();
    assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), DEFENSE_HEADER.to_vec());
    let row = rd.records().next().unwrap().unwrap();
    assert_eq!(&row[0], "deepjscc");
    assert_eq!(row[3].parse::<f64>().unwrap(), 9.0);

    let mut rd = csv::Reader::from_path(tmp.path().join("attacks.csv")).unwrap();
    assert_eq!(rd.records().count(), r.cells.len());
}

#[test]
fn record_round_trips_and_diffs_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let r = record();
    let path = tmp.path().join("record.json");
    r.save(&path).unwrap();
    let back = ExperimentRecord::load(&path).unwrap();
    assert_eq!(back, r);
    assert!(r.differences(&back).is_empty());
    let mut other = back.clone();
    other.cells[1].report.psnr[0] = f64::from_bits(other.cells[1].report.psnr[0].to_bits() + 1);
    assert_eq!(r.differences(&other).len(), 1);
}
