//! Temporary diagnostic, not part of the suite. Run with --ignored.

use avflow::config::{ModelConfig, TrainConfig};
use avflow::evals::{generate_clips, pearson, EvalBudget};
use avflow::infer::{decode_height, decode_pitch};
use avflow::train::load_checkpoint;

#[test]
#[ignore]
fn dump_generated_latents() {
    let cfg = ModelConfig::default();
    let tcfg = TrainConfig::default();
    let model = load_checkpoint(&cfg, &tcfg, std::path::Path::new("/tmp/pilot3/runs/ckpt_final.shard"))
        .expect("load")
        .model;
    let budget = EvalBudget { clips: 2, euler_steps: 50, val_samples: 1, noise_draws: 1 };
    let clips = generate_clips(&model, &cfg, &tcfg, &budget, 0xA11A).unwrap();
    let (c, f, h, w) = cfg.video_grid;
    for (ci, clip) in clips.iter().enumerate() {
        println!("=== clip {ci} ===");
        for frame in 0..f {
            println!("frame {frame} (channel 0):");
            for row in 0..h {
                let mut line = String::new();
                for col in 0..w {
                    let v = clip.video.data[clip.video.idx4(0, frame, row, col)];
                    line.push_str(&format!("{v:6.2}"));
                }
                println!("  {line}");
            }
        }
        let (ca, t_steps, bins) = cfg.audio_grid;
        let _ = ca;
        println!("audio (channel 0, rows=time, cols=bins):");
        for t in 0..t_steps {
            let mut line = String::new();
            for b in 0..bins {
                let v = clip.audio.data[clip.audio.idx3(0, t, b)];
                line.push_str(&format!("{v:6.2}"));
            }
            println!("  {line}");
        }
    }
}

#[test]
#[ignore]
fn teacher_forced_one_shot_denoising() {
    use avflow::experts::{patchify_audio, patchify_video, unpatchify_audio, unpatchify_video};
    use avflow::flow::{interpolate_path, sample_noise_pair};
    use avflow::infer::{ModelField, VelocityField};
    use avflow::synthdata::gen_pair;

    let cfg = ModelConfig::default();
    let tcfg = TrainConfig::default();
    let model = load_checkpoint(&cfg, &tcfg, std::path::Path::new("/tmp/pilot3/runs/ckpt_final.shard"))
        .expect("load")
        .model;
    for seed in [11u64, 12, 13] {
        let sample = gen_pair(seed, &cfg);
        let true_h = decode_height(&sample.video, &cfg);
        let true_p = decode_pitch(&sample.audio);
        println!("=== sample {seed} true heights {:?}", &true_h[..8]);
        let x1_v = patchify_video(&sample.video, cfg.video_patch).unwrap();
        let x1_a = patchify_audio(&sample.audio, cfg.audio_patch).unwrap();
        let noise = sample_noise_pair(
            &sample.video.shape,
            &sample.audio.shape,
            900 + seed,
            1900 + seed,
        )
        .unwrap();
        let x0_v = patchify_video(&noise.eps_video, cfg.video_patch).unwrap();
        let x0_a = patchify_audio(&noise.eps_audio, cfg.audio_patch).unwrap();
        let mut field = ModelField {
            model: &model,
            video_caption: sample.video_caption.clone(),
            audio_caption: sample.audio_caption.clone(),
            speech: sample.speech.clone(),
        };
        let ref_tokens = patchify_video(&sample.reference, (1, cfg.video_patch.1, cfg.video_patch.2))
            .unwrap()
            .tokens;
        for s in [0.9f64, 0.7, 0.5, 0.3] {
            let t_path = 1.0 - s;
            let mut vt = interpolate_path(&x1_v.tokens /*x0 order?*/, &x1_v.tokens, 0.0).unwrap();
            // x_t = x0 + t (x1 - x0)
            vt = interpolate_path(&x0_v.tokens, &x1_v.tokens, t_path).unwrap();
            let at = interpolate_path(&x0_a.tokens, &x1_a.tokens, t_path).unwrap();
            let mut vt_pinned = vt.clone();
            let n = ref_tokens.data.len();
            vt_pinned.data[..n].copy_from_slice(&ref_tokens.data);
            let (uv, ua) = field.eval(&vt_pinned, &at, s).unwrap();
            // x̂1 = x_t + s·û
            let mut xh_v = vt_pinned.clone();
            for i in 0..xh_v.data.len() {
                xh_v.data[i] += s * uv.data[i];
            }
            let mut xh_a = at.clone();
            for i in 0..xh_a.data.len() {
                xh_a.data[i] += s * ua.data[i];
            }
            let video = unpatchify_video(&avflow::experts::TokenSeq { tokens: xh_v, layout: x1_v.layout.clone() });
            let audio = unpatchify_audio(&avflow::experts::TokenSeq { tokens: xh_a, layout: x1_a.layout.clone() });
            let h = decode_height(&video, &cfg);
            let p = decode_pitch(&audio);
            let ch = pearson(&h, &true_h).unwrap_or(0.0);
            let cp = pearson(&p, &true_p).unwrap_or(0.0);
            println!(
                "  s={s:.1}: corr(x̂1 video height, truth) = {ch:+.3}   corr(x̂1 audio pitch, truth) = {cp:+.3}"
            );
        }
        // disentangle: does the audio branch read the video, or only its own
        // signal leak? evaluate at the field's nominal s=0.5 with one stream
        // teacher-forced and the other pure noise.
        let s = 0.5f64;
        let vt_true = {
            let mut v = interpolate_path(&x0_v.tokens, &x1_v.tokens, 1.0 - s).unwrap();
            let n = ref_tokens.data.len();
            v.data[..n].copy_from_slice(&ref_tokens.data);
            v
        };
        let at_true = interpolate_path(&x0_a.tokens, &x1_a.tokens, 1.0 - s).unwrap();
        let vt_noise = {
            let mut v = x0_v.tokens.clone();
            let n = ref_tokens.data.len();
            v.data[..n].copy_from_slice(&ref_tokens.data);
            v
        };
        let at_noise = x0_a.tokens.clone();
        for (label, vt_in, at_in) in [
            ("true video + noise audio", &vt_true, &at_noise),
            ("noise video + true audio", &vt_noise, &at_true),
        ] {
            let (uv, ua) = field.eval(vt_in, at_in, s).unwrap();
            let mut xh_v = vt_in.clone();
            for i in 0..xh_v.data.len() {
                xh_v.data[i] += s * uv.data[i];
            }
            let mut xh_a = at_in.clone();
            for i in 0..xh_a.data.len() {
                xh_a.data[i] += s * ua.data[i];
            }
            let video = unpatchify_video(&avflow::experts::TokenSeq { tokens: xh_v, layout: x1_v.layout.clone() });
            let audio = unpatchify_audio(&avflow::experts::TokenSeq { tokens: xh_a, layout: x1_a.layout.clone() });
            let ch = pearson(&decode_height(&video, &cfg), &true_h).unwrap_or(0.0);
            let cp = pearson(&decode_pitch(&audio), &true_p).unwrap_or(0.0);
            println!("  mixed [{label}] @ s=0.5: video corr {ch:+.3}   audio corr {cp:+.3}");
        }
    }
}
