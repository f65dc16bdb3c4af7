use poseconf::checkpoint::Checkpoint;
use poseconf::config::Config;
use poseconf::data::SampleBatch;
use poseconf::autodiff::Tape;
use poseconf::train::model_from_checkpoint;
use poseconf::body::NUM_PARTS;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let run = &args[1];
    let cfg = Config::load(Some(std::path::Path::new(&format!("{run}/config.toml"))), &[]).unwrap();
    let ckpt = Checkpoint::load(std::path::Path::new(&format!("{run}/final.ckpt"))).unwrap();
    let data_dir = args.get(2).cloned().unwrap_or_else(|| format!("{run}/data"));
    let test = SampleBatch::read_crds(std::path::Path::new(&format!("{data_dir}/test.crds"))).unwrap();
    let mut tape = Tape::new();
    let model = model_from_checkpoint(&mut tape, &cfg, &ckpt).unwrap();

    let n = test.len();
    let occ_counts = test.occlusion_counts();
    let mut sig_vis = vec![0.0f64; NUM_PARTS];
    let mut sig_occ = vec![0.0f64; NUM_PARTS];
    let (mut n_vis, mut n_occ) = (0usize, 0usize);
    let mut at = 0;
    while at < n {
        let hi = (at + 128).min(n);
        let rows: Vec<usize> = (at..hi).collect();
        let chunk = test.select(&rows);
        tape.reset();
        let fwd = model.forward(&mut tape, &chunk.inputs).unwrap();
        let sig = tape.data(fwd.sigma.unwrap()).clone();
        for (k, &i) in rows.iter().enumerate() {
            let dst = if occ_counts[i] == 0 {
                n_vis += 1;
                &mut sig_vis
            } else if occ_counts[i] >= 8 {
                n_occ += 1;
                &mut sig_occ
            } else {
                continue;
            };
            for j in 0..NUM_PARTS {
                dst[j] += sig[[k, j]];
            }
        }
        at = hi;
    }
    println!("n_vis={} n_occ8={}", n_vis, n_occ);
    println!("part  sigma_vis  sigma_occ8  ratio");
    for j in 0..NUM_PARTS {
        let sv = sig_vis[j] / n_vis as f64;
        let so = sig_occ[j] / n_occ as f64;
        println!("{:>4}  {:>9.4}  {:>10.4}  {:>5.2}", j, sv, so, so / sv);
    }
}
