use semcom_demo::{constellation, schedule_info, toy_denoise};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn schedule_start_step_tracks_snr() {
    let hi = parse(schedule_info(20.0, 100));
    let lo = parse(schedule_info(0.0, 100));
    assert!(hi["start_step"].as_u64() < lo["start_step"].as_u64());
    assert_eq!(lo["times"].as_array().unwrap().len(), 100);
    let t = lo["t_m"].as_f64().unwrap();
    assert!((t * t - 1.0).abs() < 0.1);
}

#[test]
fn constellation_error_falls_with_snr() {
    for qam in [false, true] {
        let a = parse(constellation("rayleigh", 0.0, 0.0, qam, 1, 256))["mse"].as_f64().unwrap();
        let b = parse(constellation("rayleigh", 0.0, 25.0, qam, 1, 256))["mse"].as_f64().unwrap();
        assert!(b < a, "qam={qam}: {b} !< {a}");
    }
    let v = parse(constellation("awgn", 0.0, 10.0, false, 2, 16));
    assert_eq!(v["sent"].as_array().unwrap().len(), 16);
}

#[test]
fn toy_denoiser_counts_evaluations_and_converges() {
    // One Euler step with the exact predictor lands on the posterior mean.
    let one = parse(toy_denoise("rician", 2.0, 5.0, "euler", 1, 3, 256));
    assert_eq!(one["nfe"], 1);
    assert!(one["mse_denoised"].as_f64() < one["mse_mmse"].as_f64());

    let heun = parse(toy_denoise("rician", 2.0, 5.0, "heun", 8, 3, 256));
    let steps = heun["times"].as_array().unwrap().len() as u64 - 1;
    assert_eq!(heun["nfe"].as_u64().unwrap(), 2 * steps - 1);
    assert_eq!(heun["path"].as_array().unwrap().len() as u64, steps + 1);

    // Heun tracks a fine Euler solution of the same ODE better than Euler at equal steps.
    let fine = parse(toy_denoise("rician", 2.0, 5.0, "euler", 99, 3, 256));
    let coarse = parse(toy_denoise("rician", 2.0, 5.0, "euler", 8, 3, 256));
    let end = |v: &Value| -> Vec<f64> {
        v["path"].as_array().unwrap().last().unwrap().as_array().unwrap().iter()
            .flat_map(|p| p.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect::<Vec<_>>()).collect()
    };
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let f = end(&fine);
    assert!(dist(&end(&heun), &f) < dist(&end(&coarse), &f));
}

#[test]
fn bad_arguments_come_back_as_error_objects() {
    assert!(parse(toy_denoise("laser", 0.0, 5.0, "euler", 1, 0, 4))["error"].is_string());
    assert!(parse(toy_denoise("awgn", 0.0, 5.0, "rk4", 1, 0, 4))["error"].is_string());
    assert!(parse(schedule_info(0.0, 1))["error"].is_string());
}
