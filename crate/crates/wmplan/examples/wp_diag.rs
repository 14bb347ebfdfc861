//! Scratch diagnostic: horizon-h unroll MSE of a checkpoint under several
//! planning-context lengths. Usage: wp_diag <checkpoint> <dataset_prefix> <h>

use std::path::Path;

use wmplan::dataset::{slice, split, Dataset, DatasetReader};
use wmplan::model::{encode_state, load_checkpoint};
use wmplan::planning::unroll_with_wp_override;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let model = load_checkpoint(Path::new(&args[1])).unwrap();
    let reader = DatasetReader::open(Path::new(&args[2])).unwrap();
    let h: usize = args[3].parse().unwrap();
    let m = reader.manifest.clone();
    let data = reader.read_all().unwrap();
    let (_, val_idx) = split(m.n_traj, m.train_frac, m.seed).unwrap();
    let val: Vec<_> = val_idx.iter().map(|&i| data.trajectories[i].clone()).collect();
    let val_data = Dataset {
        env: m.env.clone(),
        policy: m.policy,
        frameskip: m.frameskip,
        seed: m.seed,
        train_frac: m.train_frac,
        trajectories: val,
    };
    let (records, _) = slice(&val_data, h).unwrap();
    for wp in 1..=3usize {
        let mut sum = 0.0;
        let mut count = 0usize;
        for rec in &records {
            let acts: Vec<[f64; 2]> = rec
                .action_window
                .iter()
                .take(h)
                .map(|a| model.norm.normalize_action(a))
                .collect();
            let latents = unroll_with_wp_override(&rec.obs_window[0], &acts, &model, wp).unwrap();
            let target = encode_state(&rec.obs_window[h], &model).unwrap();
            let pred = &latents[h].z_vis;
            let d = pred.len() as f64;
            sum += pred
                .iter()
                .zip(&target.z_vis)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / d;
            count += 1;
        }
        println!("wp={wp} h={h} mse={:.9e} over {count} slices", sum / count as f64);
    }
}
