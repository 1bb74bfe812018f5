use dp_sapf::data::{gen_datasets, ToySpec};
use dp_sapf::denoiser::{Denoiser, DenoiserParams, ModelDims};
use dp_sapf::harness::{mean_loss, pretrain_public, sample_synthetic};
use dp_sapf::metrics::{class_conditional_mmd, evaluate};

fn main() {
    let spec = ToySpec { n_public: 1024, n_sensitive: 32, n_test: 64, ..Default::default() };
    let data = gen_datasets(&spec, 2).unwrap();
    let dims = ModelDims::default();
    let t_steps = 50;
    let untrained = DenoiserParams::init(dims, t_steps, 11);
    let before = mean_loss(&Denoiser::new(untrained.clone()).unwrap(), &data.public, 777).unwrap();

    let t0 = std::time::Instant::now();
    let trained = pretrain_public(&data.public, dims, t_steps, 1500, 32, 0.05, 11).unwrap();
    let after = mean_loss(&Denoiser::new(trained.clone()).unwrap(), &data.public, 777).unwrap();
    println!("pretrain 1500 steps bs32 lr0.05: loss {before:.4} -> {after:.4} [{:.1}s]", t0.elapsed().as_secs_f64());

    let t0 = std::time::Instant::now();
    let synth_u = sample_synthetic(&untrained, 128, 5).unwrap();
    let synth_t = sample_synthetic(&trained, 128, 5).unwrap();
    println!("sampling 2x128 images [{:.1}s]", t0.elapsed().as_secs_f64());
    let mmd_u = class_conditional_mmd(&synth_u, &data.public, 4).unwrap();
    let mmd_t = class_conditional_mmd(&synth_t, &data.public, 4).unwrap();
    println!("MMD untrained={mmd_u:.4} trained={mmd_t:.4}");
    let m_u = evaluate(&synth_u, &data.public, 4).unwrap();
    let m_t = evaluate(&synth_t, &data.public, 4).unwrap();
    println!("util_acc untrained={:.3} trained={:.3}", m_u.util_acc, m_t.util_acc);

    // peek at one trained sample per class vs template
    for label in 0..4 {
        let img = &synth_t.iter().find(|s| s.label == label).unwrap().x0;
        let tpl = dp_sapf::data::class_template(label, 0);
        let corr: f64 = img.iter().zip(&tpl).map(|(a, b)| a * b).sum::<f64>()
            / (img.iter().map(|v| v*v).sum::<f64>().sqrt() * tpl.iter().map(|v| v*v).sum::<f64>().sqrt());
        println!("class {label}: corr(sample, template) = {corr:.3}");
    }
}
