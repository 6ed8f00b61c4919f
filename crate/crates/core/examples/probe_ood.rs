// quick out-of-distribution check for the shipped surrogate
use modeshift::closed_form::restricted_costs;
use modeshift::io::{gen_fixture, FixtureSpec};
use modeshift::mc::{estimate_probs_mc, scaled_log_costs};
use modeshift::surrogate::MlpModel;
use modeshift::types::Mode;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let spec = FixtureSpec::default();
    let bundle = gen_fixture(&spec, dir.path()).unwrap();
    let truth = spec.true_params;
    let model = MlpModel::load(std::path::Path::new("/tmp/smoke/model.bin")).unwrap();

    let mut n5 = 0usize;
    let mut n6 = 0usize;
    let mut err5 = (0.0f64, 0.0f64); // (sum abs, max abs)
    let mut err6 = (0.0f64, 0.0f64);
    let mut shown = 0;
    for (key, row) in bundle.attrs.iter().take(400) {
        let wage = 25.0;
        let costs = restricted_costs(row, wage, truth.beta, &Mode::ALL);
        let x = scaled_log_costs(&costs, truth.sigma).unwrap();
        let n_avail = x.values().filter(|v| v.is_finite()).count();
        let oracle = estimate_probs_mc(&x, truth.cor_tfs, truth.cor_fs, 100_000, 42).unwrap();
        let pred = model.predict(&x, truth.cor_tfs, truth.cor_fs).unwrap();
        let mut max_abs = 0.0f64;
        let mut sum_abs = 0.0f64;
        for m in Mode::ALL {
            let d = (oracle[m] - pred[m]).abs();
            max_abs = max_abs.max(d);
            sum_abs += d;
        }
        let centered: Vec<f64> = {
            let fin: Vec<f64> = x.values().copied().filter(|v| v.is_finite()).collect();
            let mean = fin.iter().sum::<f64>() / fin.len() as f64;
            fin.iter().map(|v| v - mean).collect()
        };
        let spread = centered.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if n_avail == 6 {
            n6 += 1;
            err6.0 += max_abs;
            err6.1 = err6.1.max(max_abs);
        } else {
            n5 += 1;
            err5.0 += max_abs;
            err5.1 = err5.1.max(max_abs);
        }
        if shown < 6 && n_avail < 6 {
            eprintln!(
                "{:?} avail={} spread={:.2} maxabs={:.3} sumabs={:.3} oracle_taxi={:.3} pred_taxi={:.3}",
                key, n_avail, spread, max_abs, sum_abs, oracle[Mode::Taxi], pred[Mode::Taxi]
            );
            shown += 1;
        }
    }
    eprintln!(
        "6-mode cells: {} mean(maxabs)={:.4} worst={:.4}",
        n6, err6.0 / n6.max(1) as f64, err6.1
    );
    eprintln!(
        "5-mode cells: {} mean(maxabs)={:.4} worst={:.4}",
        n5, err5.0 / n5.max(1) as f64, err5.1
    );
}
