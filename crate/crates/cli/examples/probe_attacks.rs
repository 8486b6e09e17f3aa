use std::time::Instant;
use textshield_cli::commands::detector_dataset_dir;
use textshield_cli::config::ExperimentConfig;
use textshield_core::detector::{load_dataset, CombinerInput, DetectorEnsemble, DetectorTrainConfig, MatrixView, DetectionItem};
use textshield_core::saliency::Method;

fn feats(item: &DetectionItem) -> Vec<f64> {
    let mut f = Vec::new();
    for m in Method::ALL {
        let v = item.awi.get(m).values();
        let mx = v.iter().cloned().fold(0.0, f64::max);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let big = v.iter().filter(|&&x| x > mx * 0.5).count() as f64;
        f.extend([mx, mean * 100.0, big / 10.0]);
    }
    f
}

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = "/tmp/ts-run/probe2".into();
    let data = load_dataset(&detector_dataset_dir(&cfg)).unwrap();

    // Logistic regression on summary features.
    let dim = feats(&data.train[0]).len();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for _ in 0..4000 {
        for item in &data.train {
            let x = feats(item);
            let z: f64 = w.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let g = p - f64::from(item.label);
            for (wi, xi) in w.iter_mut().zip(&x) {
                *wi -= 0.05 * g * xi;
            }
            b -= 0.05 * g;
        }
    }
    let acc = |items: &[DetectionItem]| -> f64 {
        items.iter().filter(|i| {
            let x = feats(i);
            let z: f64 = w.iter().zip(&x).map(|(a, c)| a * c).sum::<f64>() + b;
            (z > 0.0) == i.label
        }).count() as f64 / items.len() as f64
    };
    println!("logreg on summary stats: train={:.3} dev={:.3}", acc(&data.train), acc(&data.dev));

}
