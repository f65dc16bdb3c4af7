use poseconf::autodiff::Tape;
use poseconf::checkpoint::Checkpoint;
use poseconf::config::Config;
use poseconf::data::SampleBatch;
use poseconf::train::{model_from_checkpoint, predict_u};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let run = &args[1];
    let cfg = Config::load(Some(std::path::Path::new(&format!("{run}/config.toml"))), &[]).unwrap();
    let ckpt = Checkpoint::load(std::path::Path::new(&format!("{run}/final.ckpt"))).unwrap();
    let data_dir = args.get(2).cloned().unwrap_or_else(|| format!("{run}/data"));
    let val = SampleBatch::read_crds(std::path::Path::new(&format!("{data_dir}/val.crds"))).unwrap();
    let mut tape = Tape::new();
    let model = model_from_checkpoint(&mut tape, &cfg, &ckpt).unwrap();
    let mut u = predict_u(&mut tape, &model, &val).unwrap();
    u.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for p in [10, 20, 30, 40, 50, 55, 60, 65, 70, 75, 80, 85, 90, 95] {
        let rank = p as f64 / 100.0 * (u.len() - 1) as f64;
        let lo = rank.floor() as usize;
        let hi = rank.ceil() as usize;
        let frac = rank - lo as f64;
        println!("p{:>2}: {:.4}", p, u[lo] * (1.0 - frac) + u[hi] * frac);
    }
}
